use apa_numerics::NumericsError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApaError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt data: {0}")]
    Corrupt(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl From<NumericsError> for ApaError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::Shape { .. } => ApaError::Dimension(e.to_string()),
            NumericsError::Contract(msg) => ApaError::Contract(msg),
        }
    }
}

impl From<serde_json::Error> for ApaError {
    fn from(e: serde_json::Error) -> Self {
        ApaError::Format(e.to_string())
    }
}

pub type Result<T, E = ApaError> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> ApaError {
    ApaError::Contract(msg.into())
}
