use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attention {
    /// Every position attends to every position (the diffusion drafter).
    Bidirectional,
    /// Position `i` attends to `[0, i]` (the autoregressive guider).
    Causal,
}

impl Attention {
    pub fn code(self) -> u32 {
        match self {
            Attention::Bidirectional => 0,
            Attention::Causal => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Attention::Bidirectional),
            1 => Some(Attention::Causal),
            _ => None,
        }
    }
}

/// Transformer hyperparameters. The mask id is `vocab - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub attention: Attention,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model={} must be a positive multiple of n_heads={}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::config("d_ff must be positive"));
        }
        if self.vocab < 2 {
            return Err(Error::config("vocab must hold at least one token plus MASK"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be at least 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn mask_id(&self) -> u32 {
        (self.vocab - 1) as u32
    }

    /// Scalar parameter count, matching the tensors of [`crate::model::Weights`].
    pub fn param_count(&self) -> u64 {
        let (d, f, v, l) = (
            self.d_model as u64,
            self.d_ff as u64,
            self.vocab as u64,
            self.max_len as u64,
        );
        let per_layer = 4 * d * d + 2 * d * f + 2 * d;
        v * d + l * d + self.n_layers as u64 * per_layer + d + d * v
    }
}
