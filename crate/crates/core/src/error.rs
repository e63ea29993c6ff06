//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PdmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("state error: {0}")]
    State(String),
    #[error("integration failed at t={t}: {msg}")]
    Integration { t: f64, msg: String },
    #[error("training failed at step {step}: {msg}")]
    Training { step: u64, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, PdmError>;

impl PdmError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        PdmError::InvalidArgument(msg.into())
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        PdmError::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
