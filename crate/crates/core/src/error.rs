use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("`{0}` is a synthetic dataset; create it with make_synthetic instead of loading it")]
    SyntheticNotLoadable(String),

    #[error("dataset file missing: {path}")]
    MissingData { path: PathBuf },

    #[error("corrupt dataset file {path}: {reason}")]
    CorruptData { path: PathBuf, reason: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("non-finite gradient; step aborted")]
    NonFiniteGradient,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("plotting failed: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}
