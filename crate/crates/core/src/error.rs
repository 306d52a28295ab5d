use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient tokens: need {required}, corpus has {available}")]
    InsufficientTokens { required: usize, available: usize },

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("sinkhorn balancing did not converge after {iterations} iterations (spread {spread:.3e})")]
    NoConvergence { iterations: usize, spread: f64 },

    #[error("infeasible budget: {budget} bytes requested, minimal achievable cost is {min_cost} bytes")]
    Infeasible { budget: u64, min_cost: u64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
