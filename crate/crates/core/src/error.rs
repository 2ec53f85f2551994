use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid noise model: {0}")]
    InvalidModel(String),

    #[error("instance too large for exact enumeration: {nodes} nodes exceeds cap {cap}")]
    TooLarge { nodes: f64, cap: usize },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse { line: usize, column: usize, msg: String },

    #[error("i/o error: {0}")]
    Io(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("simulation produced a non-finite state at level {level}")]
    Simulation { level: usize },

    #[error("domain error at level {level}, node {node}: {msg}")]
    Domain { level: usize, node: usize, msg: String },

    #[error("brute-force grid of {size:.3e} candidates exceeds cap {cap:.0e}")]
    GridTooLarge { size: f64, cap: f64 },
}

/// Domain failure of a coefficient evaluator, before node context is attached.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("{0}")]
pub struct DomainError(pub String);

impl DomainError {
    pub fn at(self, level: usize, node: usize) -> Error {
        Error::Domain { level, node, msg: self.0 }
    }
}
