use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad dimensions, out-of-range parameters, mismatched models.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data that the operation cannot accept.
    #[error("input error: {0}")]
    Input(String),

    /// A precondition of the decode state machine was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("weight file format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("FLOP verification failed at step {step}: {detail}")]
    Verification { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
