use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("iterative solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("singular operator: {0}")]
    SingularOperator(String),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("observation point ({x}, {y}) is not strictly inside the domain")]
    InvalidObservationPoint { x: f64, y: f64 },

    #[error("unsupported distribution: {0}")]
    UnsupportedDistribution(String),

    #[error("variance estimate {0:e} is too small to normalize sensitivity bounds")]
    DegenerateVariance(f64),

    #[error("dimension {dim} exceeds the dense oracle limit of {max}")]
    DimensionGuard { dim: usize, max: usize },

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
