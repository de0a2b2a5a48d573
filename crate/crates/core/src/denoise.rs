//! The plain denoising loop: every step re-runs the model over the whole
//! sequence, scores the still-masked positions, and fills the best ones
//! with their argmax tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freecache::partition_blocks;
use crate::model::TokenModel;
use crate::tensor::{argmax, softmax_row, FlopCounter, Tensor2D};
use crate::trace::{DecodeTrace, Decoded, PassRecord, PassRole, StepObserver, StepView};

/// Tokens of a prompt-plus-generation sequence and the ordered set of
/// positions still holding MASK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceState {
    tokens: Vec<u32>,
    prompt_len: usize,
    mask_id: u32,
    masked: Vec<usize>,
    t: usize,
}

impl SequenceState {
    /// `prompt` followed by `gen_len` MASKs, with a budget of `steps` unmask steps.
    pub fn new(prompt: &[u32], gen_len: usize, mask_id: u32, steps: usize) -> Result<Self> {
        if let Some(i) = prompt.iter().position(|&t| t >= mask_id) {
            return Err(Error::input(format!(
                "prompt token {} at position {i} is MASK or outside the vocabulary",
                prompt[i]
            )));
        }
        let mut tokens = prompt.to_vec();
        tokens.resize(prompt.len() + gen_len, mask_id);
        Ok(Self {
            tokens,
            prompt_len: prompt.len(),
            mask_id,
            masked: (prompt.len()..prompt.len() + gen_len).collect(),
            t: steps,
        })
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<u32> {
        self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn mask_id(&self) -> u32 {
        self.mask_id
    }

    /// Masked positions, ascending.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    /// Remaining step budget.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.tokens.get(pos) == Some(&self.mask_id)
    }

    /// Masked positions inside `range`, ascending.
    pub fn masked_in(&self, range: std::ops::Range<usize>) -> Vec<usize> {
        self.masked
            .iter()
            .copied()
            .filter(|p| range.contains(p))
            .collect()
    }

    /// Commit `proposals` at `positions`: `M ← M \ U`, `t ← t − 1`.
    pub fn apply_unmask(&mut self, positions: &[usize], proposals: &[u32]) -> Result<()> {
        if positions.is_empty() {
            return Err(Error::contract("empty unmask set"));
        }
        if positions.len() != proposals.len() {
            return Err(Error::contract(format!(
                "{} positions but {} proposals",
                positions.len(),
                proposals.len()
            )));
        }
        if self.t == 0 {
            return Err(Error::contract("step budget exhausted"));
        }
        for (i, (&pos, &tok)) in positions.iter().zip(proposals).enumerate() {
            if !self.is_masked(pos) || positions[..i].contains(&pos) {
                return Err(Error::contract(format!("position {pos} is not masked")));
            }
            if tok >= self.mask_id {
                return Err(Error::contract(format!(
                    "proposal {tok} for position {pos} is MASK or outside the vocabulary"
                )));
            }
        }
        for (&pos, &tok) in positions.iter().zip(proposals) {
            self.tokens[pos] = tok;
        }
        self.masked.retain(|p| !positions.contains(p));
        self.t -= 1;
        Ok(())
    }
}

/// Per-step unmask counts over a span of masked positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnmaskSchedule {
    counts: Vec<usize>,
}

impl UnmaskSchedule {
    /// `steps` equal counts summing to `total`; the last step absorbs the remainder.
    pub fn new(total: usize, steps: usize) -> Result<Self> {
        if total == 0 || steps == 0 || steps > total {
            return Err(Error::config(format!(
                "cannot unmask {total} positions in {steps} steps"
            )));
        }
        let mut counts = vec![total / steps; steps];
        counts[steps - 1] += total % steps;
        Ok(Self { counts })
    }

    /// One count per step, all 1.
    pub fn sequential(total: usize) -> Result<Self> {
        Self::new(total, total)
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn steps(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Split `steps` across blocks in proportion to their lengths (largest
    /// remainder, at least one step and at most one step per position each),
    /// then schedule each block.
    pub fn blockwise(block_lens: &[usize], steps: usize) -> Result<Vec<Self>> {
        let total: usize = block_lens.iter().sum();
        if block_lens.is_empty() || steps < block_lens.len() || steps > total {
            return Err(Error::config(format!(
                "cannot spread {steps} steps over {} blocks of {total} positions",
                block_lens.len()
            )));
        }
        let ideal: Vec<f64> = block_lens
            .iter()
            .map(|&l| steps as f64 * l as f64 / total as f64)
            .collect();
        let mut alloc: Vec<usize> = ideal
            .iter()
            .zip(block_lens)
            .map(|(&x, &l)| (x.floor() as usize).clamp(1, l))
            .collect();
        let mut sum: usize = alloc.iter().sum();
        while sum < steps {
            let b = (0..alloc.len())
                .filter(|&b| alloc[b] < block_lens[b])
                .max_by(|&a, &b| {
                    let (ra, rb) = (ideal[a] - alloc[a] as f64, ideal[b] - alloc[b] as f64);
                    ra.total_cmp(&rb).then(b.cmp(&a))
                })
                .expect("steps <= total positions");
            alloc[b] += 1;
            sum += 1;
        }
        while sum > steps {
            let b = (0..alloc.len())
                .filter(|&b| alloc[b] > 1)
                .min_by(|&a, &b| {
                    let (ra, rb) = (ideal[a] - alloc[a] as f64, ideal[b] - alloc[b] as f64);
                    ra.total_cmp(&rb).then(a.cmp(&b))
                })
                .expect("steps >= number of blocks");
            alloc[b] -= 1;
            sum -= 1;
        }
        block_lens
            .iter()
            .zip(alloc)
            .map(|(&l, s)| Self::new(l, s))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    /// Highest probability of the top token.
    #[default]
    MaskgitConfidence,
    /// Lowest Shannon entropy.
    Entropy,
    /// Largest gap between the top two probabilities.
    TopkMargin,
}

impl Heuristic {
    pub const ALL: [Heuristic; 3] = [
        Heuristic::MaskgitConfidence,
        Heuristic::Entropy,
        Heuristic::TopkMargin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Heuristic::MaskgitConfidence => "maskgit_confidence",
            Heuristic::Entropy => "entropy",
            Heuristic::TopkMargin => "topk_margin",
        }
    }
}

impl std::str::FromStr for Heuristic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Heuristic::ALL
            .into_iter()
            .find(|h| h.name() == s || (s == "confidence" && *h == Heuristic::MaskgitConfidence))
            .ok_or_else(|| Error::config(format!("unknown heuristic {s:?}")))
    }
}

/// Score each probability row; higher means unmask sooner.
pub fn score_positions<R: AsRef<[f32]>>(probs: &[R], heuristic: Heuristic) -> Result<Vec<f64>> {
    probs
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let row = row.as_ref();
            let sum: f64 = row.iter().map(|&p| p as f64).sum();
            if row.is_empty() || (sum - 1.0).abs() > 1e-4 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::input(format!("row {i} is not a distribution (sum {sum})")));
            }
            Ok(score_row(row, heuristic))
        })
        .collect()
}

fn score_row(row: &[f32], heuristic: Heuristic) -> f64 {
    match heuristic {
        Heuristic::MaskgitConfidence => row.iter().fold(0f64, |m, &p| m.max(p as f64)),
        Heuristic::Entropy => row
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| (p as f64) * (p as f64).ln())
            .sum(),
        Heuristic::TopkMargin => {
            let (mut first, mut second) = (0f64, 0f64);
            for &p in row {
                let p = p as f64;
                if p > first {
                    second = first;
                    first = p;
                } else if p > second {
                    second = p;
                }
            }
            first - second
        }
    }
}

/// The `n` candidates with the highest scores (ties to the lowest
/// position), returned in ascending position order.
pub fn select_unmask(candidates: &[usize], scores: &[f64], n: usize) -> Result<Vec<usize>> {
    if candidates.len() != scores.len() {
        return Err(Error::contract("one score per candidate required"));
    }
    if n == 0 || n > candidates.len() {
        return Err(Error::contract(format!(
            "cannot unmask {n} of {} masked positions",
            candidates.len()
        )));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(candidates[a].cmp(&candidates[b])));
    let mut chosen: Vec<usize> = order[..n].iter().map(|&i| candidates[i]).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// A logit row without its MASK entry (always the last id): fills and
/// scores range over real tokens only.
pub fn token_logits(row: &[f32]) -> &[f32] {
    &row[..row.len() - 1]
}

/// Score and fill the best `count` masked positions of `candidates` from
/// `logits` (row 0 at absolute position `window_start`).
pub(crate) fn unmask_step(
    candidates: &[usize],
    logits: &Tensor2D,
    window_start: usize,
    heuristic: Heuristic,
    count: usize,
) -> Result<(Vec<usize>, Vec<u32>)> {
    let rows: Vec<&[f32]> = candidates
        .iter()
        .map(|&p| token_logits(logits.row(p - window_start)))
        .collect();
    let probs = rows.iter().map(|r| softmax_row(r)).collect::<Result<Vec<_>>>()?;
    let scores = score_positions(&probs, heuristic)?;
    let chosen = select_unmask(candidates, &scores, count)?;
    let proposals = chosen
        .iter()
        .map(|&p| argmax(token_logits(logits.row(p - window_start))) as u32)
        .collect();
    Ok((chosen, proposals))
}

pub(crate) fn check_request(model: &dyn TokenModel, prompt: &[u32], gen_len: usize) -> Result<()> {
    if gen_len == 0 {
        return Err(Error::input("gen_len must be at least 1"));
    }
    if prompt.len() + gen_len > model.max_len() {
        return Err(Error::input(format!(
            "prompt {} + generation {} exceeds the model's max_len {}",
            prompt.len(),
            gen_len,
            model.max_len()
        )));
    }
    Ok(())
}

/// Settings shared by the plain and cached loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    /// Total denoising steps `T`.
    pub steps: usize,
    pub heuristic: Heuristic,
    /// Unmask block by block, left to right. `None` treats the whole
    /// generation region as one block.
    pub block_size: Option<usize>,
}

impl DenoiseConfig {
    pub fn new(steps: usize, heuristic: Heuristic) -> Self {
        Self {
            steps,
            heuristic,
            block_size: None,
        }
    }

    pub fn with_blocks(mut self, block_size: usize) -> Self {
        self.block_size = Some(block_size);
        self
    }
}

/// Plain decode: one full forward pass per step, no caching. Terminates
/// with every position unmasked in exactly `cfg.steps` steps.
pub fn decode_baseline(
    model: &dyn TokenModel,
    prompt: &[u32],
    gen_len: usize,
    cfg: &DenoiseConfig,
) -> Result<Decoded> {
    decode_baseline_observed(model, prompt, gen_len, cfg, &mut ())
}

pub fn decode_baseline_observed(
    model: &dyn TokenModel,
    prompt: &[u32],
    gen_len: usize,
    cfg: &DenoiseConfig,
    observer: &mut dyn StepObserver,
) -> Result<Decoded> {
    check_request(model, prompt, gen_len)?;
    let blocks = partition_blocks(prompt.len(), gen_len, cfg.block_size.unwrap_or(gen_len))?;
    let plan = UnmaskSchedule::blockwise(&blocks.lens(), cfg.steps)?;
    let mut state = SequenceState::new(prompt, gen_len, model.mask_id(), cfg.steps)?;
    let mut flops = FlopCounter::new();
    let mut trace = DecodeTrace::default();
    let len = state.len();

    for (b, schedule) in plan.iter().enumerate() {
        let block = blocks.block(b);
        for &count in schedule.counts() {
            let start = trace.begin(&flops);
            let mut cache = model.new_cache();
            let logits = model.forward_windowed(state.tokens(), &mut cache, 0..len, &mut flops)?;
            observer.on_step(&StepView {
                step: trace.steps.len(),
                tokens: state.tokens(),
                window_start: 0,
                logits: &logits,
                cache: &cache,
            });
            let candidates = state.masked_in(block.clone());
            let (chosen, proposals) = unmask_step(&candidates, &logits, 0, cfg.heuristic, count)?;
            state.apply_unmask(&chosen, &proposals)?;
            let pass = PassRecord {
                role: PassRole::Drafter,
                queries: len,
                context: len,
                spec: model.flop_spec().copied(),
            };
            trace.finish(start, &flops, len, chosen, vec![pass]);
        }
    }
    debug_assert!(state.is_done() && state.t() == 0);
    Ok(Decoded {
        tokens: state.into_tokens(),
        prompt_len: prompt.len(),
        trace,
    })
}
