use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{what} has size {size}, exceeding the cap {cap}")]
    CapExceeded { what: &'static str, size: f64, cap: f64 },
    #[error("infeasible constraint: {0}")]
    Infeasible(String),
    #[error("no convergence: {0}")]
    NonConvergence(String),
    #[error("points do not cover the origin (residual {residual:e})")]
    Coverage { residual: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
