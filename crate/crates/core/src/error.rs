use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the model, layout and metric operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("class id {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
    #[error("parameter `{name}` is incompatible: expected {expected:?}, got {actual:?}")]
    ParamMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("empty confusion matrix")]
    EmptyConfusion,
    #[error("need at least 2 run values, got {0}")]
    TooFewRuns(usize),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
