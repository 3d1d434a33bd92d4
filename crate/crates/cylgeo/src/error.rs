use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("constraint violation in {what}: deviation {deviation:.3e} exceeds tolerance {tolerance:.3e}")]
    ConstraintViolation {
        what: &'static str,
        deviation: f64,
        tolerance: f64,
    },

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("profile `{0}` has no analytic s-derivative")]
    UnsupportedDerivative(&'static str),

    #[error("solver did not converge after {iterations} iterations (last residual {residual:.3e})")]
    Divergence { iterations: usize, residual: f64 },

    #[error("singular bordered system: {0}")]
    Degeneracy(String),

    #[error("input loop is not a critical point (residual {residual:.3e} > {tolerance:.3e})")]
    NonCritical { residual: f64, tolerance: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
