use thiserror::Error;

/// Errors raised by the library.
///
/// `Contract` marks a violated precondition (shape mismatch, parameter out of
/// range); `Input` marks bad external data (unknown token, malformed file).
#[derive(Debug, Error)]
pub enum AglaError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AglaError>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(AglaError::Contract(msg.into()))
}

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(AglaError::Input(msg.into()))
}
