use thiserror::Error;

/// Errors raised by the digital twin engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TwinError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid regimen: {0}")]
    InvalidRegimen(String),

    #[error("invalid simulation grid: {0}")]
    InvalidGrid(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("insufficient samples: need at least {required}, got {actual}")]
    InsufficientSamples { required: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid observations: {0}")]
    InvalidObservations(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, TwinError>;

pub(crate) fn invalid_param(name: &'static str, reason: impl Into<String>) -> TwinError {
    TwinError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
