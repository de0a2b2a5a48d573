//! Python bindings: models, the three decoders, FLOP and memory models,
//! and K/V heatmaps.

use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dlmfp_core::denoise::{decode_baseline, DenoiseConfig, Heuristic};
use dlmfp_core::diagnostics::{self, FlopMode, Projection};
use dlmfp_core::freecache::{decode_freecache, DEFAULT_BLOCK_SIZE};
use dlmfp_core::guided::{decode_guided, FallbackSource, GuidanceConfig, GuidanceMode, MatchRule};
use dlmfp_core::model::{
    init_weights, load_weights, rule_match_rate as core_rule_match_rate, save_weights, Attention, ModelSpec, Rule,
    RuleModel, TokenModel, Transformer,
};
use dlmfp_core::rng::SplitMix64;
use dlmfp_core::tensor::FlopCounter;
use dlmfp_core::trace::Decoded;
use dlmfp_core::Error;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn attention(causal: bool) -> Attention {
    if causal {
        Attention::Causal
    } else {
        Attention::Bidirectional
    }
}

/// A token model: a seeded transformer or a rule-following double.
#[pyclass(frozen, module = "dlmfp")]
struct Model {
    inner: Arc<dyn TokenModel>,
    weights: Option<Arc<Transformer>>,
}

#[pymethods]
impl Model {
    /// Seeded transformer; defaults give the 8/2/1/16/11/32 demo model.
    #[staticmethod]
    #[pyo3(signature = (d_model=8, n_heads=2, n_layers=1, d_ff=16, vocab=11, max_len=32, causal=false, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn transformer(
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        d_ff: usize,
        vocab: usize,
        max_len: usize,
        causal: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = ModelSpec {
            d_model,
            n_heads,
            n_layers,
            d_ff,
            vocab,
            max_len,
            attention: attention(causal),
        };
        let t = Arc::new(Transformer::new(init_weights(&spec, seed).map_err(err)?).map_err(err)?);
        Ok(Self {
            inner: t.clone(),
            weights: Some(t),
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let t = Arc::new(Transformer::new(load_weights(path).map_err(err)?).map_err(err)?);
        Ok(Self {
            inner: t.clone(),
            weights: Some(t),
        })
    }

    /// Rule model predicting `x[i] = x[i-1] + x[i-2] mod (vocab - 1)` with
    /// probability `competence`.
    #[staticmethod]
    #[pyo3(signature = (competence, seed=0, vocab=11, causal=false))]
    fn rule(competence: f64, seed: u64, vocab: usize, causal: bool) -> PyResult<Self> {
        let m = RuleModel::new(Rule::Fibonacci, competence, seed, vocab, attention(causal)).map_err(err)?;
        Ok(Self {
            inner: Arc::new(m),
            weights: None,
        })
    }

    /// Write the weights; returns the payload checksum.
    fn save(&self, path: &str) -> PyResult<u64> {
        let t = self.weights.as_ref().ok_or_else(|| PyValueError::new_err("rule models have no weights"))?;
        save_weights(t.weights(), path).map_err(err)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn mask_id(&self) -> u32 {
        self.inner.mask_id()
    }

    #[getter]
    fn causal(&self) -> bool {
        self.inner.attention() == Attention::Causal
    }

    #[getter]
    fn max_len(&self) -> usize {
        self.inner.max_len()
    }

    #[getter]
    fn param_count(&self) -> Option<u64> {
        self.inner.flop_spec().map(ModelSpec::param_count)
    }

    /// Logits for every position, as a list of rows.
    fn logits(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f32>>> {
        let out = self.inner.forward_full(&tokens, &mut FlopCounter::new()).map_err(err)?;
        Ok((0..out.rows()).map(|i| out.row(i).to_vec()).collect())
    }

    /// Per-site FLOPs of one step. `mode` is `dlm`, `windowed` or `ar`.
    #[pyo3(signature = (seq_len, prefix_len=None, mode="dlm", window=None))]
    fn step_flops<'py>(
        &self,
        py: Python<'py>,
        seq_len: usize,
        prefix_len: Option<usize>,
        mode: &str,
        window: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let spec = self.spec()?;
        let mode = match (mode, window) {
            ("dlm", _) => FlopMode::DlmStep,
            ("ar", _) => FlopMode::ArDecodeStep,
            ("windowed", Some(w)) => FlopMode::DlmWindowedStep(w),
            ("windowed", None) => return Err(PyValueError::new_err("windowed mode needs window")),
            (other, _) => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
        };
        let f = diagnostics::flops_analytic(spec, seq_len, prefix_len.unwrap_or(seq_len), mode);
        let d = PyDict::new(py);
        for (site, n) in f.iter() {
            d.set_item(site.name(), n)?;
        }
        d.set_item("total", f.total())?;
        Ok(d)
    }

    /// Byte estimate at 4 bytes per value.
    #[pyo3(signature = (seq_len, cache_present=false, guider=None))]
    fn memory<'py>(
        &self,
        py: Python<'py>,
        seq_len: usize,
        cache_present: bool,
        guider: Option<&Model>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let guider = guider.map(Model::spec).transpose()?;
        let m = diagnostics::memory_estimate(self.spec()?, seq_len, cache_present, guider);
        let d = PyDict::new(py);
        d.set_item("weights", m.weights)?;
        d.set_item("kv_cache", m.kv_cache)?;
        d.set_item("activations", m.activations)?;
        d.set_item("guider", m.guider)?;
        d.set_item("total", m.total)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        match self.inner.flop_spec() {
            Some(s) => format!(
                "Model(transformer d_model={} n_heads={} n_layers={} d_ff={} vocab={} max_len={} causal={})",
                s.d_model,
                s.n_heads,
                s.n_layers,
                s.d_ff,
                s.vocab,
                s.max_len,
                self.causal()
            ),
            None => format!("Model(rule vocab={} causal={})", self.vocab_size(), self.causal()),
        }
    }
}

impl Model {
    fn spec(&self) -> PyResult<&ModelSpec> {
        self.inner
            .flop_spec()
            .ok_or_else(|| PyValueError::new_err("rule models have no FLOP spec"))
    }
}

/// Outcome of one decode.
#[pyclass(frozen, get_all, module = "dlmfp")]
struct DecodeResult {
    tokens: Vec<u32>,
    prompt_len: usize,
    steps: usize,
    dlm_passes: usize,
    ar_passes: usize,
    total_flops: u64,
    /// Positions unmasked at each step.
    unmasked: Vec<Vec<usize>>,
    /// Agreement length of each guided step; empty otherwise.
    accepted: Vec<usize>,
}

#[pymethods]
impl DecodeResult {
    #[getter]
    fn generated(&self) -> Vec<u32> {
        self.tokens[self.prompt_len..].to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "DecodeResult(steps={}, dlm_passes={}, ar_passes={}, total_flops={})",
            self.steps, self.dlm_passes, self.ar_passes, self.total_flops
        )
    }
}

impl From<Decoded> for DecodeResult {
    fn from(d: Decoded) -> Self {
        Self {
            prompt_len: d.prompt_len,
            steps: d.trace.steps.len(),
            dlm_passes: d.trace.dlm_passes(),
            ar_passes: d.trace.ar_passes(),
            total_flops: d.trace.total_flops.total(),
            unmasked: d.trace.steps.iter().map(|s| s.unmasked.clone()).collect(),
            accepted: d.trace.guided.iter().map(|g| g.k).collect(),
            tokens: d.tokens,
        }
    }
}

/// Decode `gen_len` tokens after `prompt`.
///
/// `policy` is `baseline`, `freecache`, `guided` or `guided_stochastic`;
/// guided policies need a causal `guider`.
#[pyfunction]
#[pyo3(signature = (
    dlm, prompt, gen_len, policy="baseline", steps=None, heuristic="maskgit_confidence", block_size=None,
    guider=None, speculation_block=32, topk_match=2, tau=0.5, fallback="dlm", matching="prefix"
))]
#[allow(clippy::too_many_arguments)]
fn decode(
    py: Python<'_>,
    dlm: &Model,
    prompt: Vec<u32>,
    gen_len: usize,
    policy: &str,
    steps: Option<usize>,
    heuristic: &str,
    block_size: Option<usize>,
    guider: Option<&Model>,
    speculation_block: usize,
    topk_match: usize,
    tau: f64,
    fallback: &str,
    matching: &str,
) -> PyResult<DecodeResult> {
    let heuristic: Heuristic = parse(heuristic)?;
    let mut cfg = DenoiseConfig::new(steps.unwrap_or(gen_len), heuristic);
    let dlm = dlm.inner.clone();
    let decoded = match policy {
        "baseline" => {
            cfg.block_size = block_size;
            py.detach(|| decode_baseline(dlm.as_ref(), &prompt, gen_len, &cfg))
        }
        "freecache" => {
            let cfg = cfg.with_blocks(block_size.unwrap_or(DEFAULT_BLOCK_SIZE));
            py.detach(|| decode_freecache(dlm.as_ref(), &prompt, gen_len, &cfg))
        }
        "guided" | "guided_stochastic" => {
            let guider = guider
                .ok_or_else(|| PyValueError::new_err("guided policies need a guider"))?
                .inner
                .clone();
            let g = GuidanceConfig {
                speculation_block,
                topk_match,
                tau,
                mode: if policy == "guided" {
                    GuidanceMode::DeterministicPrefix
                } else {
                    GuidanceMode::Stochastic
                },
                fallback: parse::<FallbackSource>(fallback)?,
                matching: parse::<MatchRule>(matching)?,
            };
            py.detach(|| decode_guided(dlm.as_ref(), guider.as_ref(), &prompt, gen_len, &g, block_size))
        }
        other => return Err(PyValueError::new_err(format!("unknown policy {other:?}"))),
    };
    Ok(decoded.map_err(err)?.into())
}

/// Step-to-step cosine similarity of one layer's K or V rows during an
/// uncached decode. Returns `matrix`, `masked`, `zero_norm`, `clean_mean`
/// and `masked_mean`.
#[pyfunction]
#[pyo3(signature = (model, prompt, gen_len, layer=0, kind="K", steps=None, heuristic="maskgit_confidence"))]
#[allow(clippy::too_many_arguments)]
fn kv_similarity_heatmap<'py>(
    py: Python<'py>,
    model: &Model,
    prompt: Vec<u32>,
    gen_len: usize,
    layer: usize,
    kind: &str,
    steps: Option<usize>,
    heuristic: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let kind: Projection = parse(kind)?;
    let cfg = DenoiseConfig::new(steps.unwrap_or(gen_len), parse(heuristic)?);
    let m = model.inner.clone();
    let map = py
        .detach(|| diagnostics::kv_similarity_heatmap(m.as_ref(), &prompt, gen_len, &cfg, layer, kind))
        .map_err(err)?;
    let (clean, masked) = map.class_means();
    let d = PyDict::new(py);
    d.set_item("matrix", &map.matrix)?;
    d.set_item("masked", &map.masked)?;
    d.set_item("zero_norm", &map.zero_norm)?;
    d.set_item("prompt_len", map.prompt_len)?;
    d.set_item("clean_mean", clean)?;
    d.set_item("masked_mean", masked)?;
    Ok(d)
}

/// Seeded prompt that follows the rule.
#[pyfunction]
#[pyo3(signature = (seed, length, vocab=11))]
fn rule_prompt(seed: u64, length: usize, vocab: usize) -> PyResult<Vec<u32>> {
    if vocab < 2 {
        return Err(PyValueError::new_err("vocab must be at least 2"));
    }
    let m = (vocab - 1) as u64;
    let mut rng = SplitMix64::new(seed);
    Ok(Rule::Fibonacci.sequence(rng.below(m) as u32, rng.below(m) as u32, length, m as u32))
}

/// Fraction of positions in `[start, end)` that follow the rule.
#[pyfunction]
#[pyo3(signature = (tokens, start, end, vocab=11))]
fn rule_match_rate(tokens: Vec<u32>, start: usize, end: usize, vocab: usize) -> PyResult<f64> {
    if start > end || end > tokens.len() {
        return Err(PyValueError::new_err("range out of bounds"));
    }
    Ok(core_rule_match_rate(Rule::Fibonacci, &tokens, start..end, vocab))
}

#[pymodule]
fn dlmfp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<DecodeResult>()?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(kv_similarity_heatmap, m)?)?;
    m.add_function(wrap_pyfunction!(rule_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(rule_match_rate, m)?)?;
    m.add("DEFAULT_BLOCK_SIZE", DEFAULT_BLOCK_SIZE)?;
    Ok(())
}
