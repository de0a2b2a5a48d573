//! Per-step decode records and step observers.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::model::{KvCache, ModelSpec};
use crate::tensor::{FlopCounter, Flops, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassRole {
    Drafter,
    Guider,
}

/// Shape of one forward pass: `queries` rows recomputed against `context`
/// keys. `spec` is `None` for models that do no matmuls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassRecord {
    pub role: PassRole,
    pub queries: usize,
    pub context: usize,
    pub spec: Option<ModelSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Rows recomputed by the drafter this step.
    pub window_len: usize,
    pub unmasked: Vec<usize>,
    pub flops: Flops,
    pub passes: Vec<PassRecord>,
    /// Cumulative through this step.
    pub dlm_passes: usize,
    /// Cumulative through this step.
    pub ar_passes: usize,
    pub wall_ns: u64,
}

/// How the positions committed in one guided step were licensed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedStepRecord {
    /// Masked positions in the speculation window, ascending.
    pub window: Vec<usize>,
    pub draft: Vec<u32>,
    pub draft_confidence: Vec<f32>,
    /// Guider top-K token sets per window position.
    pub guider_topk: Vec<Vec<u32>>,
    /// Agreeing prefix (or count, in count mode) length.
    pub k: usize,
    pub prefix_accepted: Vec<usize>,
    pub stochastic_accepted: Vec<usize>,
    /// Position committed by the no-agreement fallback, if any.
    pub fallback: Option<usize>,
    pub committed: Vec<(usize, u32)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub steps: Vec<StepRecord>,
    /// Matmul FLOPs over the whole decode, read from the session counter.
    pub total_flops: Flops,
    pub guided: Vec<GuidedStepRecord>,
}

impl DecodeTrace {
    pub fn dlm_passes(&self) -> usize {
        self.steps.last().map_or(0, |s| s.dlm_passes)
    }

    pub fn ar_passes(&self) -> usize {
        self.steps.last().map_or(0, |s| s.ar_passes)
    }

    pub fn wall(&self) -> Duration {
        Duration::from_nanos(self.steps.iter().map(|s| s.wall_ns).sum())
    }

    pub fn step_flops(&self) -> impl Iterator<Item = u64> + '_ {
        self.steps.iter().map(|s| s.flops.total())
    }

    pub(crate) fn begin(&self, flops: &FlopCounter) -> StepStart {
        StepStart {
            flops: flops.snapshot(),
            at: Instant::now(),
        }
    }

    pub(crate) fn finish(
        &mut self,
        start: StepStart,
        flops: &FlopCounter,
        window_len: usize,
        unmasked: Vec<usize>,
        passes: Vec<PassRecord>,
    ) {
        let (mut dlm, mut ar) = (self.dlm_passes(), self.ar_passes());
        for p in &passes {
            match p.role {
                PassRole::Drafter => dlm += 1,
                PassRole::Guider => ar += 1,
            }
        }
        self.steps.push(StepRecord {
            step: self.steps.len(),
            window_len,
            unmasked,
            flops: flops.snapshot() - start.flops,
            passes,
            dlm_passes: dlm,
            ar_passes: ar,
            wall_ns: start.at.elapsed().as_nanos() as u64,
        });
        self.total_flops = flops.snapshot();
    }
}

pub(crate) struct StepStart {
    flops: Flops,
    at: Instant,
}

/// What a decode loop exposes to observers once per drafter pass, before
/// the step's unmasking is applied.
#[derive(Debug)]
pub struct StepView<'a> {
    pub step: usize,
    pub tokens: &'a [u32],
    /// Absolute position of `logits` row 0.
    pub window_start: usize,
    pub logits: &'a Tensor2D,
    /// K/V as left by this pass (a fresh full-pass cache when decoding
    /// without caching).
    pub cache: &'a KvCache,
}

pub trait StepObserver {
    fn on_step(&mut self, view: &StepView<'_>);
}

impl StepObserver for () {
    fn on_step(&mut self, _view: &StepView<'_>) {}
}

impl<F: FnMut(&StepView<'_>)> StepObserver for F {
    fn on_step(&mut self, view: &StepView<'_>) {
        self(view)
    }
}

/// Final tokens plus the decode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    pub prompt_len: usize,
    pub trace: DecodeTrace,
}

impl Decoded {
    pub fn generated(&self) -> &[u32] {
        &self.tokens[self.prompt_len..]
    }
}
