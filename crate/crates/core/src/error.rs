use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the average-K pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} at row {row} is out of range for {classes} classes")]
    InvalidLabel {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("inconsistent pseudo-labels: {0}")]
    InconsistentPseudoLabels(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
