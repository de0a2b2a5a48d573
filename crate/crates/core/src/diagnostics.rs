//! Analytic FLOP and memory models, FLOP verification of decode traces, and
//! K/V stability heatmaps.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoise::{decode_baseline_observed, DenoiseConfig};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, TokenModel};
use crate::tensor::{FlopCounter, Flops, Site, Tensor2D};
use crate::trace::{DecodeTrace, StepView};

/// What one forward pass computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopMode {
    /// One new token of a causal model over a prefix of `l` tokens.
    ArDecodeStep,
    /// Full bidirectional pass over `L` positions.
    DlmStep,
    /// `window` recomputed positions attending over `L`.
    DlmWindowedStep(usize),
}

/// Matmul FLOPs of `queries` rows attending over `context` keys.
pub fn pass_flops(spec: &ModelSpec, queries: usize, context: usize) -> Flops {
    let (n, c, d, f, v, layers) = (
        queries as u64,
        context as u64,
        spec.d_model as u64,
        spec.d_ff as u64,
        spec.vocab as u64,
        spec.n_layers as u64,
    );
    let mut out = Flops::default();
    for site in [Site::QProj, Site::KProj, Site::VProj, Site::OutProj] {
        out.record(site, layers * 2 * n * d * d);
    }
    out.record(Site::Scores, layers * 2 * n * c * d);
    out.record(Site::Mix, layers * 2 * n * c * d);
    out.record(Site::Ffn1, layers * 2 * n * d * f);
    out.record(Site::Ffn2, layers * 2 * n * f * d);
    out.record(Site::Head, 2 * n * d * v);
    out
}

/// Per-site FLOPs of one step: `seq_len` is `L`, `prefix_len` is `l`.
pub fn flops_analytic(spec: &ModelSpec, seq_len: usize, prefix_len: usize, mode: FlopMode) -> Flops {
    match mode {
        FlopMode::ArDecodeStep => pass_flops(spec, 1, prefix_len),
        FlopMode::DlmStep => pass_flops(spec, seq_len, seq_len),
        FlopMode::DlmWindowedStep(window) => pass_flops(spec, window, seq_len),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub steps: usize,
    pub passes: usize,
    pub total: Flops,
}

/// Check every step's counted FLOPs against the analytic model of the
/// passes it records, site by site, and the trace total against the sum.
pub fn verify_flops(trace: &DecodeTrace) -> Result<FlopReport> {
    let mut total = Flops::default();
    let mut passes = 0;
    for (i, step) in trace.steps.iter().enumerate() {
        let mut want = Flops::default();
        for p in &step.passes {
            if let Some(spec) = &p.spec {
                want += pass_flops(spec, p.queries, p.context);
            }
            passes += 1;
        }
        if let Some((site, got)) = step.flops.iter().find(|&(s, n)| want.get(s) != n) {
            return Err(Error::Verification {
                step: i,
                detail: format!("{} counted {got}, model predicts {}", site.name(), want.get(site)),
            });
        }
        total += want;
    }
    if total != trace.total_flops {
        return Err(Error::Verification {
            step: trace.steps.len(),
            detail: format!(
                "session total {} differs from the per-step sum {}",
                trace.total_flops.total(),
                total.total()
            ),
        });
    }
    Ok(FlopReport {
        steps: trace.steps.len(),
        passes,
        total,
    })
}

/// Analytic byte counts at 4 bytes per value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub weights: u64,
    pub kv_cache: u64,
    /// Peak live tensors of one forward pass.
    pub activations: u64,
    pub guider: u64,
    pub total: u64,
}

fn model_bytes(spec: &ModelSpec, seq_len: usize, cache_present: bool) -> (u64, u64, u64) {
    let (l, d, f, v) = (seq_len as u64, spec.d_model as u64, spec.d_ff as u64, spec.vocab as u64);
    let weights = spec.param_count() * 4;
    let kv = if cache_present {
        spec.n_layers as u64 * 2 * l * d * 4
    } else {
        0
    };
    // residual, normed input, q, k, v and mixed rows plus one head's scores;
    // residual, normed input, hidden and output; normed input and logits
    let attention = if spec.n_layers > 0 { 6 * l * d + l * l } else { 0 };
    let ffn = if spec.n_layers > 0 { 3 * l * d + l * f } else { 0 };
    let head = 2 * l * d + l * v;
    (weights, kv, 4 * attention.max(ffn).max(head))
}

pub fn memory_estimate(
    spec: &ModelSpec,
    seq_len: usize,
    cache_present: bool,
    guider: Option<&ModelSpec>,
) -> MemoryEstimate {
    let (weights, kv_cache, activations) = model_bytes(spec, seq_len, cache_present);
    let guider = guider.map_or(0, |g| {
        let (w, kv, a) = model_bytes(g, seq_len, true);
        w + kv + a
    });
    MemoryEstimate {
        weights,
        kv_cache,
        activations,
        guider,
        total: weights + kv_cache + activations + guider,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Projection {
    K,
    V,
}

impl std::str::FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "k" | "K" => Ok(Projection::K),
            "v" | "V" => Ok(Projection::V),
            _ => Err(Error::config(format!("unknown projection {s:?}"))),
        }
    }
}

/// Step-to-step cosine similarity of one layer's K or V rows.
///
/// Snapshot `s` is the cache of the full pass at step `s`, plus one final
/// pass over the finished sequence; row `r` compares snapshot `r + 1`
/// against snapshot `r`, so there is one row per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHeatmap {
    pub layer: usize,
    pub kind: Projection,
    pub prompt_len: usize,
    /// `steps × L`, entries in `[-1, 1]`.
    pub matrix: Vec<Vec<f64>>,
    /// Positions holding MASK in snapshot `r`.
    pub masked: Vec<Vec<bool>>,
    /// Cells where either vector had zero norm (recorded as 0).
    pub zero_norm: Vec<(usize, usize)>,
}

impl SimilarityHeatmap {
    pub fn steps(&self) -> usize {
        self.matrix.len()
    }

    pub fn positions(&self) -> usize {
        self.matrix.first().map_or(0, Vec::len)
    }

    /// Generation positions clean since at least the snapshot before `r`.
    pub fn is_clean(&self, r: usize, pos: usize) -> bool {
        pos >= self.prompt_len && r >= 1 && !self.masked[r - 1][pos]
    }

    /// Mean similarity over clean cells and over masked cells; `None` where
    /// a class is empty.
    pub fn class_means(&self) -> (Option<f64>, Option<f64>) {
        let (mut clean, mut masked) = ((0.0, 0usize), (0.0, 0usize));
        for (r, row) in self.matrix.iter().enumerate() {
            for (pos, &s) in row.iter().enumerate() {
                if self.is_clean(r, pos) {
                    clean = (clean.0 + s, clean.1 + 1);
                } else if self.masked[r][pos] {
                    masked = (masked.0 + s, masked.1 + 1);
                }
            }
        }
        let mean = |(sum, n): (f64, usize)| (n > 0).then(|| sum / n as f64);
        (mean(clean), mean(masked))
    }

    /// Header row of positions, then one row per step.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let header: Vec<String> = (0..self.positions()).map(|p| p.to_string()).collect();
        writeln!(out, "{}", header.join(","))?;
        for row in &self.matrix {
            let cells: Vec<String> = row.iter().map(|s| format!("{s:.9}")).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "layer": self.layer,
            "kind": self.kind,
            "steps": self.steps(),
            "positions": self.positions(),
            "prompt_len": self.prompt_len,
            "zero_norm_cells": self.zero_norm,
            "metric": "cosine",
        })
    }

    /// `<stem>.csv` plus a `<stem>.json` metadata sidecar.
    pub fn save(&self, csv_path: &Path) -> Result<std::path::PathBuf> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(csv_path)?))?;
        let json_path = csv_path.with_extension("json");
        let text = serde_json::to_string_pretty(&self.metadata()).expect("metadata serializes");
        std::fs::write(&json_path, text)?;
        Ok(json_path)
    }
}

/// Cosine similarity; identical vectors give exactly 1, a zero vector gives `None`.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    if a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) && a.iter().any(|&x| x != 0.0) {
        return Some(1.0);
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (na > 0.0 && nb > 0.0).then(|| (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Decode without caching and record how one layer's K or V rows move
/// from step to step.
pub fn kv_similarity_heatmap(
    model: &dyn TokenModel,
    prompt: &[u32],
    gen_len: usize,
    cfg: &DenoiseConfig,
    layer: usize,
    kind: Projection,
) -> Result<SimilarityHeatmap> {
    let layers = model.new_cache().n_layers();
    if layer >= layers {
        return Err(Error::config(format!("layer {layer} out of range for a {layers}-layer model")));
    }
    let pick = |cache: &crate::model::KvCache| -> Tensor2D {
        match kind {
            Projection::K => cache.keys(layer).clone(),
            Projection::V => cache.values(layer).clone(),
        }
    };
    let mask = model.mask_id();
    let mut snapshots: Vec<(Tensor2D, Vec<bool>)> = Vec::new();
    let decoded = decode_baseline_observed(model, prompt, gen_len, cfg, &mut |v: &StepView| {
        snapshots.push((pick(v.cache), v.tokens.iter().map(|&t| t == mask).collect()))
    })?;
    let mut cache = model.new_cache();
    let len = decoded.tokens.len();
    model.forward_windowed(&decoded.tokens, &mut cache, 0..len, &mut FlopCounter::new())?;
    snapshots.push((pick(&cache), vec![false; len]));

    let mut matrix = Vec::with_capacity(snapshots.len() - 1);
    let mut zero_norm = Vec::new();
    for (r, pair) in snapshots.windows(2).enumerate() {
        let row = (0..len)
            .map(|pos| {
                cosine(pair[1].0.row(pos), pair[0].0.row(pos)).unwrap_or_else(|| {
                    zero_norm.push((r, pos));
                    0.0
                })
            })
            .collect();
        matrix.push(row);
    }
    snapshots.pop();
    Ok(SimilarityHeatmap {
        layer,
        kind,
        prompt_len: prompt.len(),
        matrix,
        masked: snapshots.into_iter().map(|(_, m)| m).collect(),
        zero_norm,
    })
}
