use thiserror::Error;

/// Errors raised by the barycenter library.
#[derive(Debug, Error)]
pub enum PrwbError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("weights not on simplex: {0}")]
    NotOnSimplex(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("retraction input is rank deficient (smallest |R_ii| = {0:e})")]
    RankDeficient(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
}

pub type Result<T> = std::result::Result<T, PrwbError>;

pub(crate) fn shape_err(msg: impl Into<String>) -> PrwbError {
    PrwbError::Shape(msg.into())
}
