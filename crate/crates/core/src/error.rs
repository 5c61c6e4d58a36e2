//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A trajectory or intermediate quantity left the representable range.
    #[error("numeric overflow in {context}: non-finite value encountered")]
    NonFinite { context: &'static str },

    /// A vector or matrix had an unexpected size.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A documented precondition was violated by the caller.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// The Riccati fixed-point iteration did not converge within its cap.
    #[error("DARE iteration did not converge within {max_iter} iterations (last delta {delta:.3e})")]
    DareNoConvergence { max_iter: usize, delta: f64 },

    /// Cholesky factorization failed even after the jitter ladder.
    #[error("covariance factorization failed after maximum jitter {max_jitter:.1e}")]
    Factorization { max_jitter: f64 },

    /// Invalid experiment configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
