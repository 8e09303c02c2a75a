use thiserror::Error;

/// Errors raised anywhere in the codec toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("coding error: {0}")]
    Coding(String),
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("encoder/decoder reconstruction mismatch: {0}")]
    Sync(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
