use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VistexError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VistexError {
    #[error("invalid class split: {0}")]
    InvalidSplit(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("stage index {index} out of range 0..={max}")]
    InvalidStage { index: usize, max: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Novel-class labels reached a code path that must only see the base split.
    #[error("contamination: {0}")]
    Contamination(String),

    #[error("support/query protocol violation: {0}")]
    Protocol(String),

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: png: {message}")]
    Image { path: PathBuf, message: String },
}

impl VistexError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.into(),
            source,
        }
    }

    /// Data, contamination and corruption failures map to exit code 2 at the CLI.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Self::InvalidConfig(_) | Self::InvalidStage { .. })
    }
}
