use thiserror::Error;

use crate::expr::ParseError;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("pencil is not regular")]
    NotRegular,
    #[error("pencil index {0} exceeds one")]
    IndexTooHigh(usize),
    #[error("[E V, A W] is numerically singular (condition number {0:.3e})")]
    IllConditioned(f64),
    #[error("matrix is singular: {0}")]
    Singular(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("newton failed: {0}")]
    Newton(String),
    #[error("no gain exists: {0}")]
    NoGain(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}
