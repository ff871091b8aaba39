use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum FqrError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),
}

impl FqrError {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        FqrError::Validation(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        FqrError::Numerical(msg.into())
    }

    /// Short machine-readable tag used in CLI error documents.
    pub fn kind(&self) -> &'static str {
        match self {
            FqrError::Io(_) => "io",
            FqrError::Parse { .. } => "parse",
            FqrError::Validation(_) => "validation",
            FqrError::Numerical(_) => "numerical",
            FqrError::Json(_) => "json",
            FqrError::Config(_) => "config",
        }
    }
}

pub type Result<T> = std::result::Result<T, FqrError>;
