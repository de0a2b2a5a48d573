//! Reducing-window caching. The generation region is split into blocks that
//! are decoded left to right; each step recomputes only `[frozen_len, L)`
//! and reads the frozen prefix's K/V from the cache.
//!
//! A block's K/V are frozen one pass after it completes, so the frozen rows
//! are the ones computed with the block's final clean tokens.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::denoise::{check_request, unmask_step, DenoiseConfig, SequenceState, UnmaskSchedule};
use crate::error::{Error, Result};
use crate::model::{KvCache, TokenModel};
use crate::tensor::{FlopCounter, Tensor2D};
use crate::trace::{DecodeTrace, Decoded, PassRecord, PassRole, StepObserver, StepView};

/// Default block length.
pub const DEFAULT_BLOCK_SIZE: usize = 256;

/// Partition of the generation region into blocks, with a cursor on the
/// block being decoded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSchedule {
    pub block_size: usize,
    /// Absolute start of each block, followed by the end of the sequence.
    boundaries: Vec<usize>,
    current: usize,
}

impl BlockSchedule {
    pub fn n_blocks(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn block(&self, b: usize) -> Range<usize> {
        self.boundaries[b]..self.boundaries[b + 1]
    }

    pub fn lens(&self) -> Vec<usize> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn starts(&self) -> &[usize] {
        &self.boundaries[..self.n_blocks()]
    }

    pub fn current_block(&self) -> usize {
        self.current
    }

    /// Range of the block being decoded; `None` once every block is done.
    pub fn current_range(&self) -> Option<Range<usize>> {
        (self.current < self.n_blocks()).then(|| self.block(self.current))
    }

    pub fn is_finished(&self) -> bool {
        self.current >= self.n_blocks()
    }
}

pub fn partition_blocks(prompt_len: usize, gen_len: usize, block_size: usize) -> Result<BlockSchedule> {
    if gen_len == 0 {
        return Err(Error::input("gen_len must be at least 1"));
    }
    if block_size == 0 {
        return Err(Error::config("block_size must be at least 1"));
    }
    let end = prompt_len + gen_len;
    let mut boundaries: Vec<usize> = (prompt_len..end).step_by(block_size).collect();
    boundaries.push(end);
    Ok(BlockSchedule {
        block_size,
        boundaries,
        current: 0,
    })
}

pub struct InitialPass {
    pub cache: KvCache,
    pub logits: Tensor2D,
}

/// Full pass over `tokens` that fills the cache at every position and
/// freezes the prompt.
pub fn initial_pass(
    model: &dyn TokenModel,
    tokens: &[u32],
    prompt_len: usize,
    flops: &mut FlopCounter,
) -> Result<InitialPass> {
    let mut cache = model.new_cache();
    let logits = model.forward_windowed(tokens, &mut cache, 0..tokens.len(), flops)?;
    cache.freeze_to(prompt_len)?;
    Ok(InitialPass { cache, logits })
}

/// Freeze the schedule's current block and move on to the next one.
pub fn freeze_block(cache: &mut KvCache, schedule: &mut BlockSchedule, state: &SequenceState) -> Result<()> {
    let block = schedule
        .current_range()
        .ok_or_else(|| Error::contract("every block is already frozen"))?;
    if let Some(p) = block.clone().find(|&p| state.is_masked(p)) {
        return Err(Error::contract(format!("block {block:?} still masked at {p}")));
    }
    if cache.frozen_len() != block.start {
        return Err(Error::contract(format!(
            "frozen prefix ends at {} but block starts at {}",
            cache.frozen_len(),
            block.start
        )));
    }
    cache.freeze_to(block.end)?;
    schedule.current += 1;
    Ok(())
}

/// Logits of one drafter pass; row 0 is absolute position `window.start`.
pub struct WindowPass {
    pub window: Range<usize>,
    pub logits: Tensor2D,
}

/// Decode state shared by the cached and guided loops: sequence, DLM cache,
/// block cursor and the FLOP counter.
pub struct FreeCacheSession<'m> {
    model: &'m dyn TokenModel,
    state: SequenceState,
    cache: KvCache,
    blocks: BlockSchedule,
    flops: FlopCounter,
    /// Completed block whose K/V are refreshed by the next pass, then frozen.
    pending: bool,
    /// Blocks whose decoding is done (possibly not yet frozen).
    completed: usize,
    initial: Option<Tensor2D>,
}

impl<'m> FreeCacheSession<'m> {
    /// Runs the initial pass; its logits serve the first step.
    pub fn start(
        model: &'m dyn TokenModel,
        prompt: &[u32],
        gen_len: usize,
        block_size: usize,
        step_budget: usize,
    ) -> Result<Self> {
        check_request(model, prompt, gen_len)?;
        let blocks = partition_blocks(prompt.len(), gen_len, block_size)?;
        let state = SequenceState::new(prompt, gen_len, model.mask_id(), step_budget)?;
        let mut flops = FlopCounter::new();
        let init = initial_pass(model, state.tokens(), prompt.len(), &mut flops)?;
        Ok(Self {
            model,
            state,
            cache: init.cache,
            blocks,
            flops,
            pending: false,
            completed: 0,
            initial: Some(init.logits),
        })
    }

    pub fn state(&self) -> &SequenceState {
        &self.state
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn blocks(&self) -> &BlockSchedule {
        &self.blocks
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    pub fn flops_mut(&mut self) -> &mut FlopCounter {
        &mut self.flops
    }

    /// The block currently being decoded.
    pub fn active_block(&self) -> Option<Range<usize>> {
        (self.completed < self.blocks.n_blocks()).then(|| self.blocks.block(self.completed))
    }

    pub fn is_done(&self) -> bool {
        self.state.is_done()
    }

    /// Drafter logits over the active window. The first call returns the
    /// initial pass; later calls recompute `[frozen_len, L)` and then freeze
    /// a block completed in the previous step.
    pub fn pass(&mut self) -> Result<WindowPass> {
        let len = self.state.len();
        if let Some(logits) = self.initial.take() {
            return Ok(WindowPass { window: 0..len, logits });
        }
        let window = self.cache.frozen_len()..len;
        let logits = self
            .model
            .forward_windowed(self.state.tokens(), &mut self.cache, window.clone(), &mut self.flops)?;
        if self.pending {
            freeze_block(&mut self.cache, &mut self.blocks, &self.state)?;
            self.pending = false;
        }
        Ok(WindowPass { window, logits })
    }

    /// Commit tokens inside the active block; marks the block complete when
    /// its last mask is filled.
    pub fn commit(&mut self, positions: &[usize], tokens: &[u32]) -> Result<()> {
        let block = self
            .active_block()
            .ok_or_else(|| Error::contract("no active block"))?;
        if let Some(p) = positions.iter().find(|p| !block.contains(p)) {
            return Err(Error::contract(format!("position {p} outside active block {block:?}")));
        }
        self.state.apply_unmask(positions, tokens)?;
        if !block.clone().any(|p| self.state.is_masked(p)) {
            self.completed += 1;
            if self.completed == self.blocks.n_blocks() {
                // nothing reads the last block's K/V again
                freeze_block(&mut self.cache, &mut self.blocks, &self.state)?;
            } else {
                self.pending = true;
            }
        }
        Ok(())
    }

    pub fn drafter_pass_record(&self, window: &Range<usize>) -> PassRecord {
        PassRecord {
            role: PassRole::Drafter,
            queries: window.len(),
            context: self.state.len(),
            spec: self.model.flop_spec().copied(),
        }
    }

    pub fn into_state(self) -> SequenceState {
        self.state
    }
}

/// Cached decode. `cfg.block_size` defaults to [`DEFAULT_BLOCK_SIZE`];
/// steps are spread over blocks as in the block-restricted baseline.
pub fn decode_freecache(
    model: &dyn TokenModel,
    prompt: &[u32],
    gen_len: usize,
    cfg: &DenoiseConfig,
) -> Result<Decoded> {
    decode_freecache_observed(model, prompt, gen_len, cfg, &mut ())
}

pub fn decode_freecache_observed(
    model: &dyn TokenModel,
    prompt: &[u32],
    gen_len: usize,
    cfg: &DenoiseConfig,
    observer: &mut dyn StepObserver,
) -> Result<Decoded> {
    let block_size = cfg.block_size.unwrap_or(DEFAULT_BLOCK_SIZE);
    check_request(model, prompt, gen_len)?;
    let lens = partition_blocks(prompt.len(), gen_len, block_size)?.lens();
    let plan = UnmaskSchedule::blockwise(&lens, cfg.steps)?;

    let mut trace = DecodeTrace::default();
    // the initial pass is charged to the first step
    let start = trace.begin(&FlopCounter::new());
    let mut session = FreeCacheSession::start(model, prompt, gen_len, block_size, cfg.steps)?;
    let mut start = Some(start);
    for schedule in &plan {
        for &count in schedule.counts() {
            let step_start = start.take().unwrap_or_else(|| trace.begin(session.flops()));
            decode_block_step(&mut session, count, cfg, &mut trace, step_start, observer)?;
        }
    }
    debug_assert!(session.is_done() && session.blocks().is_finished());
    Ok(Decoded {
        tokens: session.into_state().into_tokens(),
        prompt_len: prompt.len(),
        trace,
    })
}

/// One windowed step inside the active block: pass, score that block's
/// masked positions, unmask `count` of them.
fn decode_block_step(
    session: &mut FreeCacheSession<'_>,
    count: usize,
    cfg: &DenoiseConfig,
    trace: &mut DecodeTrace,
    start: crate::trace::StepStart,
    observer: &mut dyn StepObserver,
) -> Result<()> {
    let block = session
        .active_block()
        .ok_or_else(|| Error::contract("schedule outlived the blocks"))?;
    let pass = session.pass()?;
    observer.on_step(&StepView {
        step: trace.steps.len(),
        tokens: session.state().tokens(),
        window_start: pass.window.start,
        logits: &pass.logits,
        cache: session.cache(),
    });
    let candidates = session.state().masked_in(block);
    let (chosen, proposals) = unmask_step(&candidates, &pass.logits, pass.window.start, cfg.heuristic, count)?;
    session.commit(&chosen, &proposals)?;
    let record = session.drafter_pass_record(&pass.window);
    trace.finish(start, session.flops(), pass.window.len(), chosen, vec![record]);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::{decode_baseline, decode_baseline_observed, Heuristic};
    use crate::model::{init_weights, Attention, ModelSpec, Transformer};

    fn tiny(layers: usize, seed: u64) -> Transformer {
        let spec = ModelSpec {
            d_model: 8,
            n_heads: 2,
            n_layers: layers,
            d_ff: 16,
            vocab: 11,
            max_len: 32,
            attention: Attention::Bidirectional,
        };
        Transformer::new(init_weights(&spec, seed).unwrap()).unwrap()
    }

    #[test]
    fn partitions() {
        assert_eq!(partition_blocks(0, 256, 256).unwrap().lens(), vec![256]);
        let s = partition_blocks(3, 10, 4).unwrap();
        assert_eq!(s.lens(), vec![4, 4, 2]);
        assert_eq!(s.starts(), &[3, 7, 11]);
        assert_eq!(s.block(2), 11..13);
        assert_eq!(partition_blocks(5, 1, 256).unwrap().lens(), vec![1]);
        assert!(matches!(partition_blocks(0, 0, 4), Err(Error::Input(_))));
        assert!(matches!(partition_blocks(0, 4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn initial_pass_matches_full_forward() {
        let m = tiny(2, 4);
        let tokens = [1, 2, 3, 10, 10, 10];
        let a = initial_pass(&m, &tokens, 3, &mut FlopCounter::new()).unwrap();
        let b = initial_pass(&m, &tokens, 3, &mut FlopCounter::new()).unwrap();
        let full = m.forward_with_cache(&tokens, &mut FlopCounter::new()).unwrap();
        assert_eq!(a.cache.n_layers(), 2);
        assert_eq!(a.cache.len(), 6);
        assert_eq!(a.cache.keys(0).cols(), 8);
        assert_eq!(a.cache.frozen_len(), 3);
        assert!(a.cache.prefix_bits_equal(&full.cache, 6));
        assert!(a.cache.prefix_bits_equal(&b.cache, 6));
        assert_eq!(a.logits, full.logits);
    }

    #[test]
    fn freeze_block_contracts() {
        let m = tiny(1, 1);
        let mut session = FreeCacheSession::start(&m, &[1, 2], 4, 2, 4).unwrap();
        let mut cache = session.cache().clone();
        let mut sched = session.blocks().clone();
        assert!(matches!(
            freeze_block(&mut cache, &mut sched, session.state()),
            Err(Error::Contract(_))
        ));
        session.pass().unwrap();
        session.commit(&[2, 3], &[4, 5]).unwrap();
        let mut cache = session.cache().clone();
        freeze_block(&mut cache, &mut sched, session.state()).unwrap();
        assert_eq!(cache.frozen_len(), 4);
        assert_eq!(sched.current_block(), 1);
        assert!(matches!(session.commit(&[1], &[1]), Err(Error::Contract(_))));
    }

    #[test]
    fn single_block_one_layer_equals_baseline() {
        for seed in 0..4 {
            let m = tiny(1, seed);
            let cfg = DenoiseConfig::new(5, Heuristic::MaskgitConfidence);
            let base = decode_baseline(&m, &[3, 1, 4], 10, &cfg).unwrap();
            let cached = decode_freecache(&m, &[3, 1, 4], 10, &cfg).unwrap();
            assert_eq!(base.tokens, cached.tokens);
        }
    }

    #[test]
    fn one_layer_blocks_match_block_restricted_baseline() {
        for seed in 0..6 {
            let m = tiny(1, seed);
            let prompt = [2, 7, 1];
            let cfg = DenoiseConfig::new(16, Heuristic::Entropy).with_blocks(4);
            let mut base_logits = Vec::new();
            let base = decode_baseline_observed(&m, &prompt, 16, &cfg, &mut |v: &StepView| {
                base_logits.push(v.logits.clone())
            })
            .unwrap();
            let mut cached_logits = Vec::new();
            let cached = decode_freecache_observed(&m, &prompt, 16, &cfg, &mut |v: &StepView| {
                cached_logits.push((v.window_start, v.logits.clone()))
            })
            .unwrap();
            assert_eq!(base.tokens, cached.tokens);
            for (full, (ws, win)) in base_logits.iter().zip(&cached_logits) {
                for r in 0..win.rows() {
                    for (a, b) in full.row(ws + r).iter().zip(win.row(r)) {
                        assert!((a - b).abs() <= 1e-5 * a.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn windows_shrink_and_frozen_prefix_is_immutable() {
        let m = tiny(3, 11);
        let cfg = DenoiseConfig::new(12, Heuristic::TopkMargin).with_blocks(4);
        let mut snapshots: Vec<KvCache> = Vec::new();
        let out = decode_freecache_observed(&m, &[5, 6], 12, &cfg, &mut |v: &StepView| {
            snapshots.push(v.cache.clone())
        })
        .unwrap();
        for (i, s) in snapshots.iter().enumerate() {
            for later in &snapshots[i..] {
                assert!(later.frozen_len() >= s.frozen_len());
                assert!(s.prefix_bits_equal(later, s.frozen_len()));
            }
        }
        let f: Vec<u64> = out.trace.step_flops().collect();
        assert!(f.windows(2).all(|w| w[0] >= w[1]), "{f:?}");
        let wl: Vec<usize> = out.trace.steps.iter().map(|s| s.window_len).collect();
        // initial pass, then window sizes shrinking one block at a time
        assert_eq!(wl[0], 14);
        let drops: Vec<usize> = wl.windows(2).filter(|w| w[0] != w[1]).map(|w| w[0] - w[1]).collect();
        assert_eq!(drops, vec![2, 4, 4]);
        let base = decode_baseline(&m, &[5, 6], 12, &cfg).unwrap();
        assert!(out.trace.total_flops.projections() < base.trace.total_flops.projections());
    }
}
