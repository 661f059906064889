use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FtmeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FtmeError {
    #[error("trajectory blow-up after t = {last_finite_time}")]
    BlowUp { last_finite_time: f64 },

    #[error("no closed form available for {0}")]
    NoClosedForm(String),

    #[error("degenerate fundamental matrix (|det| = {det:e})")]
    DegenerateMatrix { det: f64 },

    #[error("unsorted exponents: lambda1 = {lambda1} < lambda2 = {lambda2}")]
    UnsortedExponents { lambda1: f64, lambda2: f64 },

    #[error("internal consistency failure: {0}")]
    Inconsistent(String),

    #[error("vector field must be autonomous")]
    NotAutonomous,

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl FtmeError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FtmeError::InvalidInput(msg.into())
    }
}
