//! Token models: the seeded toy transformer, the rule-based test double,
//! their shared interface, and the per-layer K/V cache they write into.

mod cache;
mod io;
mod rule;
mod spec;
mod transformer;
mod weights;

use std::ops::Range;

pub use cache::KvCache;
pub use io::{fnv1a, load_weights, read_weights, save_weights, write_weights, WEIGHT_MAGIC, WEIGHT_VERSION};
pub use rule::{rule_match_rate, Rule, RuleModel};
pub use spec::{Attention, ModelSpec};
pub use transformer::{FullForward, Transformer};
pub use weights::{init_weights, LayerWeights, Weights};

use crate::error::Result;
use crate::tensor::{FlopCounter, Tensor2D};

/// Anything that maps a token sequence to per-position logits.
///
/// Bidirectional models emit, at row `i`, a distribution for the token at
/// `i`. Causal models emit the next-token distribution: row `i` predicts
/// position `i + 1`.
pub trait TokenModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Reserved mask id, always the last vocabulary entry.
    fn mask_id(&self) -> u32 {
        (self.vocab_size() - 1) as u32
    }

    fn attention(&self) -> Attention;

    fn max_len(&self) -> usize;

    /// Dimensions used for FLOP accounting; `None` for models that do no matmuls.
    fn flop_spec(&self) -> Option<&ModelSpec>;

    fn new_cache(&self) -> KvCache;

    /// Logits for `window`, recomputing K/V there and reading the frozen
    /// prefix `[0, window.start)` from `cache`.
    ///
    /// `window` must be `[cache.frozen_len(), tokens.len())`.
    fn forward_windowed(
        &self,
        tokens: &[u32],
        cache: &mut KvCache,
        window: Range<usize>,
        flops: &mut FlopCounter,
    ) -> Result<Tensor2D>;

    /// Logits for every position, without any cached state.
    fn forward_full(&self, tokens: &[u32], flops: &mut FlopCounter) -> Result<Tensor2D> {
        let mut cache = self.new_cache();
        self.forward_windowed(tokens, &mut cache, 0..tokens.len(), flops)
    }
}

pub(crate) fn check_window(tokens: &[u32], cache: &KvCache, window: &Range<usize>) -> Result<()> {
    use crate::error::Error;
    if window.start != cache.frozen_len() {
        return Err(Error::contract(format!(
            "window starts at {} but the frozen prefix ends at {}",
            window.start,
            cache.frozen_len()
        )));
    }
    if window.end != tokens.len() || window.start >= window.end {
        return Err(Error::contract(format!(
            "window {:?} must be a non-empty suffix of a length-{} sequence",
            window,
            tokens.len()
        )));
    }
    Ok(())
}
