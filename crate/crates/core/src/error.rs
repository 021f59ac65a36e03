use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not connected to any tensor requiring gradients")]
    DetachedGraph,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("malformed tensor file: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("json error")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
