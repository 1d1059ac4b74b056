use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid bounds: {0}")]
    InvalidBounds(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("inadmissible control at step {step}: {reason}")]
    InadmissibleControl { step: usize, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("index {index} out of range (max {max})")]
    OutOfRange { index: usize, max: usize },

    #[error("syntax error at position {pos}: {msg}")]
    Syntax { pos: usize, msg: String },

    #[error("invalid expression: {0}")]
    InvalidExpr(String),

    #[error("fixed-point iteration did not converge at step {step} (residual {residual:e})")]
    FixedPoint { step: usize, residual: f64 },

    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },

    #[error("initial segments are not ordered: {0}")]
    InitialOrder(String),

    #[error("functional failed for control {control}, sample {sample}: {source}")]
    Functional {
        control: usize,
        sample: usize,
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
