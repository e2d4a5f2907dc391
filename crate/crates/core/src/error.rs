use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{layer}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        layer: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{layer}: backward context was not produced by this layer's current parameters")]
    StaleContext { layer: &'static str },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("spatial underflow: stage {stage} receives extent {extent}, smaller than its stride {stride}")]
    SpatialUnderflow {
        stage: usize,
        extent: usize,
        stride: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at {phase} iteration {iteration}: loss {loss}")]
    Diverged {
        phase: &'static str,
        iteration: usize,
        loss: f64,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("inner fold {fold} failed: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: malformed file at byte offset {offset}: {reason}")]
    Format {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
