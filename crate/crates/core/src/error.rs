use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite gradient at parameter index {index}")]
    NonFiniteGradient { index: usize },
    #[error("non-finite loss in {0}")]
    NonFiniteLoss(&'static str),
    #[error("non-finite state after env step: {0:?}")]
    NonFiniteState(Vec<f64>),
    #[error("not enough real data: have {have}, need {need}")]
    NotEnoughData { have: usize, need: usize },
    #[error("model has not been trained")]
    UntrainedModel,
    #[error("both replay buffers are empty")]
    EmptyBuffers,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate variance in sample")]
    DegenerateVariance,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
