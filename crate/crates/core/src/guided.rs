//! Guided unmasking: the DLM drafts a speculation window of masked
//! positions in one pass, a causal guider re-reads the draft-filled
//! sequence, and the agreeing run is committed.
//!
//! The guider keeps its own causal cache. Its K/V for a prefix stay valid
//! while the prefix tokens are unchanged, so each guider pass only covers
//! the positions whose predecessors changed since the last pass.

use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::denoise::token_logits;
use crate::error::{Error, Result};
use crate::freecache::{FreeCacheSession, DEFAULT_BLOCK_SIZE};
use crate::model::{Attention, KvCache, TokenModel};
use crate::tensor::{argmax, softmax_row, top_k, FlopCounter, Tensor2D};
use crate::trace::{DecodeTrace, Decoded, GuidedStepRecord, PassRecord, PassRole, StepObserver, StepView};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    #[default]
    DeterministicPrefix,
    /// Prefix acceptance plus the confidence-threshold rule.
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackSource {
    #[default]
    Dlm,
    Ar,
}

/// How the agreement length `k` is read off the per-position matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// Longest agreeing prefix.
    #[default]
    Prefix,
    /// Number of agreeing positions; the first `k` window positions are committed.
    Count,
}

macro_rules! named {
    ($ty:ty { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $(Self::$variant => $name),+ }
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok(Self::$variant),)+
                    _ => Err(Error::config(format!("unknown {} {s:?}", stringify!($ty)))),
                }
            }
        }
    };
}

named!(GuidanceMode { DeterministicPrefix => "deterministic_prefix", Stochastic => "stochastic" });
named!(FallbackSource { Dlm => "dlm", Ar => "ar" });
named!(MatchRule { Prefix => "prefix", Count => "count" });

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub speculation_block: usize,
    pub topk_match: usize,
    pub tau: f64,
    pub mode: GuidanceMode,
    pub fallback: FallbackSource,
    pub matching: MatchRule,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            speculation_block: 32,
            topk_match: 2,
            tau: 0.5,
            mode: GuidanceMode::DeterministicPrefix,
            fallback: FallbackSource::Dlm,
            matching: MatchRule::Prefix,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.speculation_block == 0 {
            return Err(Error::config("speculation_block must be at least 1"));
        }
        if self.topk_match == 0 {
            return Err(Error::config("topk_match must be at least 1"));
        }
        check_tau(self.tau)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::config(format!("tau must be non-negative, got {tau}")));
    }
    Ok(())
}

/// Top-1 proposals for a set of masked positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Draft {
    pub positions: Vec<usize>,
    pub tokens: Vec<u32>,
    /// Probability of each drafted token.
    pub max_probs: Vec<f32>,
}

/// Read a draft off drafter logits whose row 0 is `window_start`.
pub fn draft_from_logits(logits: &Tensor2D, window_start: usize, positions: &[usize]) -> Result<Draft> {
    if positions.is_empty() {
        return Err(Error::contract("no masked positions to draft"));
    }
    let mut tokens = Vec::with_capacity(positions.len());
    let mut max_probs = Vec::with_capacity(positions.len());
    for &p in positions {
        let row = token_logits(logits.row(p - window_start));
        let probs = softmax_row(row)?;
        let best = argmax(row);
        tokens.push(best as u32);
        max_probs.push(probs[best]);
    }
    Ok(Draft {
        positions: positions.to_vec(),
        tokens,
        max_probs,
    })
}

/// One full drafter pass over `tokens`, drafting the masked `positions`.
pub fn dlm_draft(
    model: &dyn TokenModel,
    tokens: &[u32],
    positions: &[usize],
    flops: &mut FlopCounter,
) -> Result<Draft> {
    if let Some(&p) = positions.iter().find(|&&p| tokens.get(p) != Some(&model.mask_id())) {
        return Err(Error::contract(format!("position {p} is not masked")));
    }
    if positions.is_empty() {
        return Err(Error::contract("no masked positions to draft"));
    }
    let logits = model.forward_full(tokens, flops)?;
    draft_from_logits(&logits, 0, positions)
}

/// Guider view of each drafted position: top-K token ids and their
/// probabilities, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub topk: Vec<Vec<u32>>,
    pub probs: Vec<Vec<f32>>,
    /// Guider rows recomputed.
    pub window: Range<usize>,
}

/// One causal pass over the draft-filled sequence; the guider's view of
/// position `i` is its next-token prediction at `i − 1`.
pub fn ar_verify(
    model: &dyn TokenModel,
    filled: &[u32],
    positions: &[usize],
    k: usize,
    flops: &mut FlopCounter,
) -> Result<Verification> {
    let mut cache = model.new_cache();
    ar_verify_cached(model, filled, positions, k, &mut cache, flops)
}

/// As [`ar_verify`], reusing `cache` for rows below its frozen length.
pub fn ar_verify_cached(
    model: &dyn TokenModel,
    filled: &[u32],
    positions: &[usize],
    k: usize,
    cache: &mut KvCache,
    flops: &mut FlopCounter,
) -> Result<Verification> {
    let (&first, &last) = match (positions.first(), positions.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::contract("no positions to verify")),
    };
    if first == 0 {
        return Err(Error::contract("position 0 has no predecessor for the guider"));
    }
    if last >= filled.len() || positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("positions must be ascending and inside the sequence"));
    }
    let context = &filled[..last];
    if let Some(p) = context.iter().position(|&t| t == model.mask_id()) {
        return Err(Error::contract(format!("guider input still masked at {p}")));
    }
    if cache.frozen_len() >= first {
        return Err(Error::contract(format!(
            "guider cache frozen through {} but position {} needs row {}",
            cache.frozen_len(),
            first,
            first - 1
        )));
    }
    let window = cache.frozen_len()..last;
    let logits = model.forward_windowed(context, cache, window.clone(), flops)?;
    let mut topk = Vec::with_capacity(positions.len());
    let mut probs = Vec::with_capacity(positions.len());
    for &p in positions {
        let row = token_logits(logits.row(p - 1 - window.start));
        let ids = top_k(row, k.min(row.len()))?;
        let dist = softmax_row(row)?;
        probs.push(ids.iter().map(|&i| dist[i]).collect());
        topk.push(ids.into_iter().map(|i| i as u32).collect());
    }
    Ok(Verification { topk, probs, window })
}

fn agrees(draft: &[u32], sets: &[Vec<u32>]) -> Result<Vec<bool>> {
    if draft.len() != sets.len() {
        return Err(Error::contract("one guider set per drafted position required"));
    }
    Ok(draft.iter().zip(sets).map(|(t, s)| s.contains(t)).collect())
}

/// Length of the longest prefix where each draft token is in the guider's set.
pub fn prefix_match(draft: &[u32], sets: &[Vec<u32>]) -> Result<usize> {
    Ok(agrees(draft, sets)?.iter().take_while(|&&a| a).count())
}

/// Number of positions where the draft token is in the guider's set.
pub fn count_match(draft: &[u32], sets: &[Vec<u32>]) -> Result<usize> {
    Ok(agrees(draft, sets)?.iter().filter(|&&a| a).count())
}

/// Accept a position when its draft probability exceeds `tau` times the
/// guider's best top-K probability there.
pub fn stochastic_accept(draft_max_probs: &[f32], guider_topk_probs: &[Vec<f32>], tau: f64) -> Result<Vec<bool>> {
    check_tau(tau)?;
    if draft_max_probs.len() != guider_topk_probs.len() {
        return Err(Error::contract("one guider row per drafted position required"));
    }
    let valid = |p: f32| (0.0..=1.0).contains(&p);
    draft_max_probs
        .iter()
        .zip(guider_topk_probs)
        .map(|(&p, g)| {
            if !valid(p) || !g.iter().all(|&q| valid(q)) {
                return Err(Error::input("probabilities must lie in [0, 1]"));
            }
            let best = g.iter().fold(0f32, |m, &q| m.max(q)) as f64;
            Ok(p as f64 > tau * best)
        })
        .collect()
}

/// Decode with guidance over FreeCache blocks of `block_size` (default
/// [`DEFAULT_BLOCK_SIZE`]).
pub fn decode_guided(
    dlm: &dyn TokenModel,
    ar: &dyn TokenModel,
    prompt: &[u32],
    gen_len: usize,
    cfg: &GuidanceConfig,
    block_size: Option<usize>,
) -> Result<Decoded> {
    decode_guided_observed(dlm, ar, prompt, gen_len, cfg, block_size, &mut ())
}

pub fn decode_guided_observed(
    dlm: &dyn TokenModel,
    ar: &dyn TokenModel,
    prompt: &[u32],
    gen_len: usize,
    cfg: &GuidanceConfig,
    block_size: Option<usize>,
    observer: &mut dyn StepObserver,
) -> Result<Decoded> {
    run_guided(dlm, ar, prompt, gen_len, cfg, block_size, observer, true)
}

#[allow(clippy::too_many_arguments)]
fn run_guided(
    dlm: &dyn TokenModel,
    ar: &dyn TokenModel,
    prompt: &[u32],
    gen_len: usize,
    cfg: &GuidanceConfig,
    block_size: Option<usize>,
    observer: &mut dyn StepObserver,
    reuse_guider_cache: bool,
) -> Result<Decoded> {
    cfg.validate()?;
    if dlm.vocab_size() != ar.vocab_size() {
        return Err(Error::config(format!(
            "drafter vocabulary {} differs from guider vocabulary {}",
            dlm.vocab_size(),
            ar.vocab_size()
        )));
    }
    if ar.attention() != Attention::Causal {
        return Err(Error::config("the guider must be a causal model"));
    }
    if prompt.is_empty() {
        return Err(Error::input("guided decoding needs a non-empty prompt"));
    }
    if prompt.len() + gen_len > ar.max_len() {
        return Err(Error::input(format!(
            "sequence of {} exceeds the guider's max_len {}",
            prompt.len() + gen_len,
            ar.max_len()
        )));
    }

    let mut trace = DecodeTrace::default();
    let mut start = Some(trace.begin(&FlopCounter::new()));
    let block_size = block_size.unwrap_or(DEFAULT_BLOCK_SIZE);
    let mut session = FreeCacheSession::start(dlm, prompt, gen_len, block_size, gen_len)?;
    let mut guider_cache = ar.new_cache();

    while !session.is_done() {
        let step_start = start.take().unwrap_or_else(|| trace.begin(session.flops()));
        let block = session
            .active_block()
            .ok_or_else(|| Error::contract("masked positions outside every block"))?;
        let pass = session.pass()?;
        observer.on_step(&StepView {
            step: trace.steps.len(),
            tokens: session.state().tokens(),
            window_start: pass.window.start,
            logits: &pass.logits,
            cache: session.cache(),
        });
        let mut window = session.state().masked_in(block);
        window.truncate(cfg.speculation_block);
        let draft = draft_from_logits(&pass.logits, pass.window.start, &window)?;

        let mut filled = session.state().tokens().to_vec();
        for (&p, &t) in window.iter().zip(&draft.tokens) {
            filled[p] = t;
        }
        if !reuse_guider_cache {
            guider_cache = ar.new_cache();
        }
        let verify = ar_verify_cached(ar, &filled, &window, cfg.topk_match, &mut guider_cache, session.flops_mut())?;

        let k = match cfg.matching {
            MatchRule::Prefix => prefix_match(&draft.tokens, &verify.topk)?,
            MatchRule::Count => count_match(&draft.tokens, &verify.topk)?,
        };
        let prefix_accepted: Vec<usize> = window[..k].to_vec();
        let stochastic_accepted: Vec<usize> = match cfg.mode {
            GuidanceMode::DeterministicPrefix => Vec::new(),
            GuidanceMode::Stochastic => stochastic_accept(&draft.max_probs, &verify.probs, cfg.tau)?
                .into_iter()
                .enumerate()
                .filter(|&(j, ok)| ok && j >= k)
                .map(|(j, _)| window[j])
                .collect(),
        };
        let mut committed: Vec<(usize, u32)> = window
            .iter()
            .zip(&draft.tokens)
            .filter(|(p, _)| prefix_accepted.contains(p) || stochastic_accepted.contains(p))
            .map(|(&p, &t)| (p, t))
            .collect();
        let fallback = committed.is_empty().then(|| {
            let tok = match cfg.fallback {
                FallbackSource::Dlm => draft.tokens[0],
                FallbackSource::Ar => verify.topk[0][0],
            };
            committed.push((window[0], tok));
            window[0]
        });
        let (positions, tokens): (Vec<usize>, Vec<u32>) = committed.iter().copied().unzip();
        session.commit(&positions, &tokens)?;

        if reuse_guider_cache {
            // rows stay exact up to the first token that differs from what
            // the guider read, and the next pass must start at or before
            // the row predicting the next masked position
            let now = session.state().tokens();
            let used = &filled[..*window.last().expect("non-empty window")];
            let lcp = used.iter().zip(now).take_while(|(a, b)| a == b).count();
            let next = session.state().masked().first().copied().unwrap_or(now.len());
            guider_cache.freeze_to(lcp.min(next.saturating_sub(1)))?;
        }

        let passes = vec![
            session.drafter_pass_record(&pass.window),
            PassRecord {
                role: PassRole::Guider,
                queries: verify.window.len(),
                context: verify.window.end,
                spec: ar.flop_spec().copied(),
            },
        ];
        trace.guided.push(GuidedStepRecord {
            window: window.clone(),
            draft: draft.tokens,
            draft_confidence: draft.max_probs,
            guider_topk: verify.topk,
            k,
            prefix_accepted,
            stochastic_accepted,
            fallback,
            committed,
        });
        trace.finish(step_start, session.flops(), pass.window.len(), positions, passes);
    }
    Ok(Decoded {
        tokens: session.into_state().into_tokens(),
        prompt_len: prompt.len(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::{decode_baseline, DenoiseConfig, Heuristic};
    use crate::model::{init_weights, ModelSpec, Rule, RuleModel, Transformer};
    use crate::rng::SplitMix64;

    fn transformer(layers: usize, attention: Attention, seed: u64) -> Transformer {
        let spec = ModelSpec {
            d_model: 8,
            n_heads: 2,
            n_layers: layers,
            d_ff: 16,
            vocab: 11,
            max_len: 48,
            attention,
        };
        Transformer::new(init_weights(&spec, seed).unwrap()).unwrap()
    }

    fn rule(p: f64, attention: Attention, seed: u64) -> RuleModel {
        RuleModel::new(Rule::Fibonacci, p, seed, 11, attention).unwrap()
    }

    #[test]
    fn defaults_and_validation() {
        let c = GuidanceConfig::default();
        assert_eq!((c.speculation_block, c.topk_match, c.tau), (32, 2, 0.5));
        assert!(GuidanceConfig { tau: -0.1, ..c }.validate().is_err());
        assert!(GuidanceConfig { topk_match: 0, ..c }.validate().is_err());
        assert!(GuidanceConfig { speculation_block: 0, ..c }.validate().is_err());
        assert_eq!("stochastic".parse::<GuidanceMode>().unwrap(), GuidanceMode::Stochastic);
        assert_eq!("ar".parse::<FallbackSource>().unwrap(), FallbackSource::Ar);
        assert!("bogus".parse::<MatchRule>().is_err());
    }

    #[test]
    fn prefix_semantics() {
        let (a, b, c, d, x) = (1, 2, 3, 4, 9);
        let sets = vec![vec![a], vec![b], vec![x], vec![d]];
        assert_eq!(prefix_match(&[a, b, c, d], &sets).unwrap(), 2);
        assert_eq!(count_match(&[a, b, c, d], &sets).unwrap(), 3);
        assert_eq!(prefix_match(&[a, b, x, d], &sets).unwrap(), 4);
        assert_eq!(prefix_match(&[x, b, x, d], &sets).unwrap(), 0);
        assert!(prefix_match(&[a], &sets).is_err());
    }

    #[test]
    fn stochastic_rule() {
        assert_eq!(stochastic_accept(&[0.4], &[vec![0.9, 0.05]], 0.5).unwrap(), vec![false]);
        assert_eq!(stochastic_accept(&[0.46], &[vec![0.9]], 0.5).unwrap(), vec![true]);
        assert_eq!(stochastic_accept(&[1e-6, 0.3], &[vec![1.0], vec![0.7]], 0.0).unwrap(), vec![true, true]);
        assert_eq!(stochastic_accept(&[1.0], &[vec![1e-3]], 1e9).unwrap(), vec![false]);
        assert!(matches!(stochastic_accept(&[0.5], &[vec![0.5]], -1.0), Err(Error::Config(_))));
        assert!(matches!(stochastic_accept(&[1.5], &[vec![0.5]], 0.5), Err(Error::Input(_))));
    }

    #[test]
    fn draft_matches_full_forward_argmax() {
        let m = transformer(2, Attention::Bidirectional, 3);
        let tokens = [1, 2, 3, 10, 10, 10, 10];
        let draft = dlm_draft(&m, &tokens, &[3, 5], &mut FlopCounter::new()).unwrap();
        let logits = m.forward_full(&tokens, &mut FlopCounter::new()).unwrap();
        for (j, &p) in [3usize, 5].iter().enumerate() {
            let row = &logits.row(p)[..10];
            let mut best = 0;
            for v in 1..10 {
                if row[v] > row[best] {
                    best = v;
                }
            }
            assert_eq!(draft.tokens[j], best as u32);
        }
        assert_eq!(dlm_draft(&m, &tokens, &[6], &mut FlopCounter::new()).unwrap().tokens.len(), 1);
        assert!(matches!(dlm_draft(&m, &tokens, &[], &mut FlopCounter::new()), Err(Error::Contract(_))));
        assert!(matches!(dlm_draft(&m, &tokens, &[1], &mut FlopCounter::new()), Err(Error::Contract(_))));
    }

    #[test]
    fn verify_matches_sort_oracle() {
        let g = transformer(2, Attention::Causal, 5);
        let filled = [4, 2, 7, 7, 1, 0, 3];
        let positions = [3, 4, 6];
        let v = ar_verify(&g, &filled, &positions, 5, &mut FlopCounter::new()).unwrap();
        let logits = g.forward_full(&filled, &mut FlopCounter::new()).unwrap();
        for (j, &p) in positions.iter().enumerate() {
            let row = &logits.row(p - 1)[..10];
            let mut ids: Vec<usize> = (0..10).collect();
            ids.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            assert_eq!(v.topk[j], ids[..5].iter().map(|&i| i as u32).collect::<Vec<_>>());
            assert!(v.probs[j].windows(2).all(|w| w[0] >= w[1]));
        }
        let all = ar_verify(&g, &filled, &positions, 10, &mut FlopCounter::new()).unwrap();
        assert!(positions.iter().enumerate().all(|(j, &p)| all.topk[j].contains(&filled[p])));
        assert!(matches!(ar_verify(&g, &filled, &[0, 1], 2, &mut FlopCounter::new()), Err(Error::Contract(_))));
        assert!(matches!(
            ar_verify(&g, &[1, 10, 2, 3], &[3], 2, &mut FlopCounter::new()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn self_agreement_top1() {
        let seq = Rule::Fibonacci.sequence(1, 3, 12, 10);
        let g = rule(1.0, Attention::Causal, 0);
        let v = ar_verify(&g, &seq, &[5, 6, 7], 1, &mut FlopCounter::new()).unwrap();
        assert_eq!(v.topk, vec![vec![seq[5]], vec![seq[6]], vec![seq[7]]]);
    }

    #[test]
    fn full_agreement_takes_one_step_per_window() {
        let prompt = Rule::Fibonacci.sequence(2, 7, 6, 10);
        let out = decode_guided(
            &rule(1.0, Attention::Bidirectional, 1),
            &rule(1.0, Attention::Causal, 1),
            &prompt,
            128,
            &GuidanceConfig::default(),
            None,
        )
        .unwrap();
        assert_eq!(out.trace.steps.len(), 4);
        assert_eq!((out.trace.dlm_passes(), out.trace.ar_passes()), (4, 4));
        assert_eq!(out.tokens, Rule::Fibonacci.sequence(2, 7, 134, 10));
    }

    #[test]
    fn zero_agreement_is_sequential_baseline() {
        let prompt = Rule::Fibonacci.sequence(4, 1, 5, 10);
        let dlm = rule(1.0, Attention::Bidirectional, 2);
        let out = decode_guided(&dlm, &rule(0.0, Attention::Causal, 2), &prompt, 40, &GuidanceConfig::default(), None)
            .unwrap();
        assert_eq!(out.trace.steps.len(), 40);
        assert!(out.trace.guided.iter().all(|g| g.k == 0 && g.fallback.is_some()));
        let base = decode_baseline(&dlm, &prompt, 40, &DenoiseConfig::new(40, Heuristic::MaskgitConfidence)).unwrap();
        assert_eq!(out.tokens, base.tokens);
    }

    #[test]
    fn progress_soundness_and_no_correction() {
        let mut rng = SplitMix64::new(99);
        for seed in 0..6 {
            let dlm = transformer(2, Attention::Bidirectional, seed);
            let ar = transformer(1, Attention::Causal, seed + 100);
            let prompt: Vec<u32> = (0..4).map(|_| rng.below(10) as u32).collect();
            for mode in [GuidanceMode::DeterministicPrefix, GuidanceMode::Stochastic] {
                let cfg = GuidanceConfig {
                    speculation_block: 5,
                    topk_match: 5,
                    mode,
                    ..Default::default()
                };
                let mut seen: Vec<Vec<u32>> = Vec::new();
                let out = decode_guided_observed(&dlm, &ar, &prompt, 20, &cfg, Some(8), &mut |v: &StepView| {
                    seen.push(v.tokens.to_vec())
                })
                .unwrap();
                for g in &out.trace.guided {
                    assert!(!g.committed.is_empty());
                    for &p in &g.prefix_accepted {
                        let j = g.window.iter().position(|&w| w == p).unwrap();
                        assert_eq!(out.tokens[p], g.draft[j]);
                    }
                }
                seen.push(out.tokens.clone());
                for w in seen.windows(2) {
                    for (a, b) in w[0].iter().zip(&w[1]) {
                        assert!(*a == 10 || a == b);
                    }
                }
            }
        }
    }

    #[test]
    fn guider_cache_is_exact() {
        for seed in 0..4 {
            let dlm = transformer(2, Attention::Bidirectional, seed);
            let ar = transformer(2, Attention::Causal, seed + 7);
            let cfg = GuidanceConfig {
                speculation_block: 4,
                topk_match: 5,
                fallback: FallbackSource::Ar,
                mode: GuidanceMode::Stochastic,
                ..Default::default()
            };
            let cached = run_guided(&dlm, &ar, &[1, 2, 3], 24, &cfg, Some(8), &mut (), true).unwrap();
            let fresh = run_guided(&dlm, &ar, &[1, 2, 3], 24, &cfg, Some(8), &mut (), false).unwrap();
            assert_eq!(cached.tokens, fresh.tokens);
            assert_eq!(cached.trace.guided, fresh.trace.guided);
            assert!(cached.trace.total_flops.total() < fresh.trace.total_flops.total());
        }
    }

    #[test]
    fn tau_limits() {
        let dlm = transformer(2, Attention::Bidirectional, 1);
        let ar = transformer(2, Attention::Causal, 2);
        let base = GuidanceConfig {
            speculation_block: 6,
            ..Default::default()
        };
        let zero = decode_guided(&dlm, &ar, &[3, 4], 18, &GuidanceConfig { tau: 0.0, mode: GuidanceMode::Stochastic, ..base }, None)
            .unwrap();
        assert_eq!(zero.trace.steps.len(), 3);
        assert!(zero.trace.guided.iter().all(|g| g.committed.len() == g.window.len()));
        let huge = decode_guided(&dlm, &ar, &[3, 4], 18, &GuidanceConfig { tau: 1e9, mode: GuidanceMode::Stochastic, ..base }, None)
            .unwrap();
        let det = decode_guided(&dlm, &ar, &[3, 4], 18, &base, None).unwrap();
        assert_eq!(huge.tokens, det.tokens);
        assert_eq!(huge.trace.guided, det.trace.guided);
    }

    #[test]
    fn rejects_mismatched_models() {
        let dlm = rule(1.0, Attention::Bidirectional, 0);
        let small = RuleModel::new(Rule::Fibonacci, 1.0, 0, 7, Attention::Causal).unwrap();
        let cfg = GuidanceConfig::default();
        assert!(matches!(decode_guided(&dlm, &small, &[1, 2], 4, &cfg, None), Err(Error::Config(_))));
        assert!(matches!(decode_guided(&dlm, &dlm, &[1, 2], 4, &cfg, None), Err(Error::Config(_))));
        assert!(matches!(
            decode_guided(&dlm, &rule(1.0, Attention::Causal, 0), &[], 4, &cfg, None),
            Err(Error::Input(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn prefix_monotone_in_k(seed in 0u64..1000) {
            let mut rng = SplitMix64::new(seed);
            let m = 1 + rng.below(8) as usize;
            let draft: Vec<u32> = (0..m).map(|_| rng.below(10) as u32).collect();
            let rows: Vec<Vec<f32>> = (0..m).map(|_| (0..10).map(|_| rng.next_f32()).collect()).collect();
            let sets = |k: usize| -> Vec<Vec<u32>> {
                rows.iter().map(|r| top_k(r, k).unwrap().into_iter().map(|i| i as u32).collect()).collect()
            };
            let ks: Vec<usize> = [1, 2, 5].iter().map(|&k| prefix_match(&draft, &sets(k)).unwrap()).collect();
            proptest::prop_assert!(ks[0] <= ks[1] && ks[1] <= ks[2]);
        }
    }
}
