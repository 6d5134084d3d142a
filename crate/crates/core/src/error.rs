//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MarError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("filter size must be odd, got {0}")]
    EvenFilterSize(usize),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("mask is not binary: value {value} at ({row}, {col})")]
    NonBinaryMask { value: f64, row: usize, col: usize },

    #[error("numerical divergence in {step} update at iteration {iteration}")]
    Divergence { step: &'static str, iteration: usize },

    #[error("NaN detected in stage {stage} ({what})")]
    StageNan { stage: usize, what: &'static str },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("metal mask touches the image border; rays through border pixels are not integrated accurately")]
    MaskOnBorder,

    #[error("I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error at {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, MarError>;

impl MarError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        MarError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn json(path: impl AsRef<std::path::Path>, source: serde_json::Error) -> Self {
        MarError::Json {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
