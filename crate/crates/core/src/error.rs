use thiserror::Error;

/// Errors raised by the Gaussian-process numerics and training code.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum GpError {
    /// Every attempt in the jitter schedule produced a non-positive or non-finite pivot.
    #[error("matrix is not numerically positive definite after {attempts} jittered Cholesky attempts (last jitter {last_jitter:e})")]
    PositiveDefiniteFailure { attempts: usize, last_jitter: f64 },

    /// The objective could not be evaluated to a finite value.
    #[error("non-finite objective: {0}")]
    NonFiniteObjective(String),

    /// A constrained hyperparameter is at or below the feasibility floor.
    #[error("hyperparameter `{name}` = {value:e} is not above the lower limit {floor:e}")]
    PackDomainError { name: &'static str, value: f64, floor: f64 },

    #[error("objective is not finite at the starting point")]
    InvalidStart,

    #[error("training failed: {0}")]
    TrainingFailure(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A quantity that must be non-negative came out clearly negative.
    #[error("internal consistency check failed: {0}")]
    InternalConsistency(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl GpError {
    pub(crate) fn non_finite(what: impl Into<String>) -> Self {
        GpError::NonFiniteObjective(what.into())
    }
}

pub type Result<T, E = GpError> = std::result::Result<T, E>;
