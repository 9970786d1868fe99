use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("noise level {t} outside 0..={max}")]
    NoiseLevel { t: usize, max: usize },
    #[error("nothing to reverse at noise level 0")]
    ReverseAtZero,
    #[error("unknown attention layer {0}")]
    UnknownLayer(String),
    #[error("prompt error: {0}")]
    Prompt(String),
    #[error("empty reference set")]
    EmptyReferences,
    #[error("index {index} out of range for width {width}")]
    Index { index: usize, width: usize },
    #[error("missing capture for layer {0}")]
    MissingCapture(String),
    #[error("broken flow chain: {0}")]
    FlowChain(String),
    #[error("every frame has an empty subject mask")]
    NoForeground,
    #[error("non-finite gradient at iteration {0}")]
    NonFiniteGradient(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = core::result::Result<T, Error>;
