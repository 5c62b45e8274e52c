use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch-norm training needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("label {0} is not in {{0, 1}}")]
    BadLabel(u8),
    #[error("backward called before forward")]
    NoCache,
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
