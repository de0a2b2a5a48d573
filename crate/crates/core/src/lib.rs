//! Diffusion language-model inference at desk scale.
//!
//! A masked diffusion model fills a fully masked generation region over a
//! number of denoising steps. This crate provides:
//!
//! - [`denoise`]: the plain loop, re-running the model over the whole
//!   sequence every step and unmasking by a confidence heuristic.
//! - [`freecache`]: reducing-window caching. The generation region is
//!   split into blocks; once a block is fully unmasked its keys and values
//!   are frozen and later steps only recompute the suffix after it.
//! - [`guided`]: the diffusion model drafts every masked token of a
//!   speculation window in one pass, a frozen causal guider scores the
//!   draft, and the longest agreeing prefix is committed.
//! - [`diagnostics`]: closed-form FLOP and memory models, FLOP
//!   verification of decode traces, and K/V stability heatmaps.
//!
//! Models are small seeded transformers ([`model::Transformer`]) or
//! rule-based doubles ([`model::RuleModel`]) with tunable competence.

pub mod denoise;
pub mod diagnostics;
pub mod error;
pub mod freecache;
pub mod guided;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
