use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid stencil: scale {scale} must satisfy 1 <= scale < length {len}")]
    InvalidStencil { scale: usize, len: usize },

    #[error("CFL violation: coefficient {alpha} outside (0, 0.5)")]
    CflViolation { alpha: f64 },

    #[error("explicit-Euler stability budget exceeded: {budget} >= 2")]
    StabilityBudget { budget: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value produced at position {position}, channel {channel}")]
    NonFinite { position: usize, channel: usize },

    #[error("singular least-squares system: {0}")]
    Singular(String),

    #[error("exponential fit window unusable: {0}")]
    FitWindow(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl ToString, got: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
