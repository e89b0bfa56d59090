use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid routing policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid box {0:?}")]
    InvalidBox([f64; 4]),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("degenerate image: {0}")]
    DegenerateImage(String),

    #[error("finite-difference oracle failed: {0}")]
    OracleFailure(String),

    #[error("non-finite loss term `{term}` at step {step}")]
    NonFinite { term: String, step: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("refusing to write into non-empty directory {0} (pass --force)")]
    NotEmpty(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by user input or configuration rather than by
    /// a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidPolicy(_)
                | Error::Config(_)
                | Error::InvalidInput(_)
                | Error::Parse { .. }
                | Error::NotEmpty(_)
        )
    }
}
