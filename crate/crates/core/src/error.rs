use thiserror::Error;

#[derive(Debug, Error)]
pub enum PaeError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, PaeError>;

pub(crate) fn config_err(msg: impl Into<String>) -> PaeError {
    PaeError::Config(msg.into())
}
