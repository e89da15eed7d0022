//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid interval: {0}")]
    InvalidInterval(String),

    #[error("invalid caption: {0}")]
    InvalidCaption(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("infeasible scene config: {0}")]
    Infeasible(String),

    #[error("dataset schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },

    #[error("checkpoint version mismatch: found {found:?}, expected {expected:?}")]
    CheckpointVersion { found: String, expected: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("run directory incomplete, missing: {0:?}")]
    IncompleteRun(Vec<String>),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Other(String),
}

impl Error {
    /// Exit code for the CLI: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Infeasible(_) | Error::InvalidCaption(_) => 2,
            _ => 3,
        }
    }
}
