use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimensions do not line up for the requested operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A caller violated an API precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A data file could not be ingested.
    #[error("ingestion error at {path}: {message}")]
    Ingest { path: String, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn ingest(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Ingest {
            path: path.into(),
            message: msg.into(),
        }
    }
}
