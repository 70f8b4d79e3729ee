//! Crate-wide error type and result alias.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, IdvidError>;

#[derive(Debug, Error)]
pub enum IdvidError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("numeric divergence at step {step}: {msg}")]
    NumericDivergence { step: u64, msg: String },
    #[error("internal consistency violation: {0}")]
    InternalConsistency(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl IdvidError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IdvidError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 validation, 2 runtime, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            IdvidError::InvalidArgument(_) | IdvidError::Config(_) => 1,
            IdvidError::NumericDivergence { .. } => 3,
            _ => 2,
        }
    }
}
