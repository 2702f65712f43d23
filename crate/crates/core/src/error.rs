use thiserror::Error;

/// Errors raised by the numeric kernels, losses and the training harness.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("row {0} has (near) zero norm and cannot be normalized")]
    ZeroRow(usize),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("input is empty")]
    EmptyInput,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("objective returned a non-finite value at coordinate {0}")]
    NonFiniteEvaluation(usize),

    #[error("anchor {0} has an empty positive set")]
    EmptyPositiveSet(usize),

    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
