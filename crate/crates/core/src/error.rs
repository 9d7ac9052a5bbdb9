use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("infeasible problem: {0}")]
    Infeasible(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("problem too large for exact oracle: {size} support points exceed the limit of {limit}")]
    OracleRefused { size: usize, limit: usize },

    #[error("solver diverged at outer step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("non-finite state at outer step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
