use thiserror::Error;

/// Errors surfaced by the core library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("unknown token {token} for vocabulary of size {vocab}")]
    UnknownToken { token: usize, vocab: usize },

    #[error("training diverged at step {step}: loss {loss} exceeded {limit}")]
    Diverged { step: usize, loss: f64, limit: f64 },

    #[error("decode error: {0}")]
    Decode(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
