use thiserror::Error;

/// Errors produced by the synthesis and certification routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive semidefinite (minimum eigenvalue {min_eig:e})")]
    NotPsd { min_eig: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// The modified Riccati iteration diverged or stalled, which signals q >= q_c.
    #[error("no positive definite Riccati solution at loss rate {q} ({reason})")]
    NoSolution { q: f64, reason: String },

    #[error("singular transform: {0}")]
    SingularTransform(String),

    /// The closed loop is not mean-square stable at the given loss rate.
    #[error("closed loop is not mean-square stable (spectral radius {rho})")]
    Unstable { rho: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
