use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the detection library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid raster: {0}")]
    InvalidCube(String),

    #[error("unaligned pair: {left} rows vs {right} rows")]
    UnalignedPair { left: usize, right: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("cannot draw {k} samples from a population of {n}")]
    SampleTooLarge { k: usize, n: usize },

    #[error("singular covariance: matrix not positive definite after ridge retries")]
    SingularCovariance,

    #[error("zero dispersion: all rows are identical")]
    ZeroDispersion,

    #[error("degenerate labels: need at least one positive and one negative")]
    DegenerateLabels,

    #[error("cannot derange fewer than 2 pixels (selected {0})")]
    CannotDerange(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("corrupt model: {0}")]
    CorruptModel(String),

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
