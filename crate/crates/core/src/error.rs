//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    ShapeValueMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value {value} at index {index}")]
    NonFinite { value: f64, index: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at iteration {iteration}: {value}")]
    NonFiniteLoss { iteration: u64, value: f64 },
    #[error("teacher training stalled: reached {achieved:.4} accuracy after {budget} iterations (need >= {required:.2}); increase the budget")]
    TeacherBudget {
        achieved: f64,
        required: f64,
        budget: u64,
    },
    #[error("teacher parameters changed during training (hash mismatch)")]
    TeacherMutated,
    #[error("unknown architecture preset `{0}`")]
    UnknownPreset(String),
    #[error("architecture spec parse error at line {line}: {message}")]
    ArchParse { line: usize, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("truncated tensor table")]
    TruncatedTensorTable,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
