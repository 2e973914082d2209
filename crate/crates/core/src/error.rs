use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum IsanError {
    #[error("unknown token {0}")]
    UnknownToken(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite value at step {step}: {what}")]
    Numeric { step: usize, what: String },

    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },

    #[error("singular or ill-conditioned transform (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("checkpoint error in tensor `{tensor}`: {reason}")]
    Checkpoint { tensor: String, reason: String },

    #[error("regression residual {residual:e} exceeds threshold {threshold:e}")]
    Residual { residual: f64, threshold: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = IsanError> = std::result::Result<T, E>;

impl IsanError {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        IsanError::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IsanError::Io {
            path: path.into(),
            source,
        }
    }
}
