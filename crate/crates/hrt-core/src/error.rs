use thiserror::Error;

#[derive(Debug, Error)]
pub enum HrtError {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HrtError>;
