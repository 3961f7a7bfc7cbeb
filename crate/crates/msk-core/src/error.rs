//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors raised by model validation, numerical routines and I/O.
#[derive(Debug, Error)]
pub enum MskError {
    /// Vector or matrix shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A parameter lies outside its admissible range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    /// An integrand or intermediate value was NaN or infinite.
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    /// The coupling graph of the species is disconnected.
    #[error("the species coupling matrix is not irreducible")]
    NotIrreducible,
    /// A matrix that must be invertible (or positive definite) is not.
    #[error("singular matrix: {0}")]
    Singular(String),
    /// An iterative method stopped at its iteration cap.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    /// A problem size exceeds what exact enumeration or nested quadrature can handle.
    #[error("size limit exceeded: {0}")]
    TooLarge(String),
    /// An ordering or admissibility constraint of the inputs is violated.
    #[error("constraint violated: {0}")]
    Constraint(String),
    /// A configuration file could not be parsed or is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// Reading or writing a file failed.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, MskError>;
