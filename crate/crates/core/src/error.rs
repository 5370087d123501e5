use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("singular system (smallest eigenvalue {0:e})")]
    Singular(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("kernel is not certified nonexpansive: {0}")]
    NotCertified(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("no convergence after {iters} iterations (residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
