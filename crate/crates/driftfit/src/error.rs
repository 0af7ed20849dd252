use thiserror::Error;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by estimation and linear-algebra routines.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix expected to be symmetric positive-definite failed to factor,
    /// even after the diagonal-jitter retries.
    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: &'static str },

    /// Operand shapes do not line up.
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// Two sequences that must be equal length are not.
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    /// Not enough samples for the requested split or fit.
    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    /// Data contains NaN/Inf or violates a shape precondition.
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Configuration violates its invariants.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// The iterative optimizer ran out of iterations. The best iterate seen is
    /// carried so callers can inspect (or accept) it.
    #[error("no convergence after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NoConvergence {
        iterations: usize,
        grad_norm: f64,
        best_beta: Vec<f64>,
    },
}
