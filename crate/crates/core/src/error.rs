use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("k-th neighbor distance is zero at sample {index}; entropy estimate would be -inf")]
    DegenerateGeometry { index: usize },

    #[error("need more than k = {k} samples, got {got}")]
    InsufficientSamples { k: usize, got: usize },

    #[error("non-finite importance log-ratio at step {step}")]
    NonFiniteWeight { step: usize },

    #[error("neighborhood weight sum is not positive at sample {index}")]
    DegenerateWeights { index: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sample-size bound diverges: min(U^2 a^2 b^2, width^2) is zero")]
    DivergentBound,

    #[error("Lipschitz constant must lie in (0, 1), got {0}")]
    InvalidLipschitz(f64),

    #[error("support lower bound sigma must be positive")]
    DegenerateSupport,

    #[error("state ({x}, {y}) is not in free space")]
    InvalidState { x: f64, y: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
