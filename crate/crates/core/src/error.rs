use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid token id {id} (vocabulary size {vocab_size})")]
    InvalidToken { id: u32, vocab_size: usize },

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("outcomes must be sorted from least to most positive (index {0})")]
    Unsorted(usize),

    #[error("KL divergence undefined: omega puts mass {mass} on outcome {index} where Q has none")]
    SupportViolation { index: usize, mass: f64 },

    #[error("numerical abort at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("reward collapse at step {step}: reward {reward:.4} below initial {initial:.4} for {window} consecutive steps")]
    Collapse {
        step: u64,
        reward: f64,
        initial: f64,
        window: usize,
    },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
