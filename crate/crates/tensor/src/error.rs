use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("gradient check refused: {0}")]
    NonDeterministic(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
