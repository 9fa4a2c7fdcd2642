use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class {class} out of range (class count {count})")]
    ClassOutOfRange { class: usize, count: usize },
    #[error("class {0} is not present in the label map")]
    ClassAbsent(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },
    #[error("class {class} not found in the data after {attempts} draws")]
    ClassCoverage { class: usize, attempts: usize },
    #[error("every batch element was filtered out")]
    EmptyBatch,
    #[error("numerical rank deficiency: {0}")]
    NumericalRank(String),
    #[error("conflicting edits: {0}")]
    Conflict(String),
    #[error("alpha {alpha} outside [-{bound}, {bound}]")]
    AlphaOutOfBounds { alpha: f64, bound: f64 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
