//! Error taxonomy shared by the whole engine.
//!
//! Exit-code mapping for the CLI: configuration and usage problems are
//! distinct from contract violations (caller bugs) and control errors
//! (recording/substitution mismatches inside an edit job).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad schedule range, inconsistent model dims).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an API precondition (shape mismatch, bad index,
    /// duplicate recording).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Attention control failed mid-edit; identifies the offending site.
    #[error("attention control error at step {step}, layer {layer}: {msg}")]
    Control {
        step: usize,
        layer: usize,
        msg: String,
    },

    /// Training loss became non-finite.
    #[error("training diverged at step {step}: loss is not finite")]
    Divergence { step: usize },

    /// Checkpoint / container parse failure.
    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
