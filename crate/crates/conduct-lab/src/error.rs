use thiserror::Error;

/// Library-wide error type.
///
/// `Domain` covers violated preconditions (bad geometry, invalid parameters),
/// `Tolerance` covers certified-accuracy failures (series ceilings, solver
/// non-convergence beyond the requested residual).
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("tolerance error: {0}")]
    Tolerance(String),
    #[error("solver did not converge: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn tolerance(msg: impl Into<String>) -> Self {
        Error::Tolerance(msg.into())
    }

    /// Process exit code used by the CLI: 2 for domain errors, 3 for
    /// tolerance/ceiling errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_) => 2,
            Error::Tolerance(_) | Error::NoConvergence { .. } => 3,
            _ => 1,
        }
    }
}
