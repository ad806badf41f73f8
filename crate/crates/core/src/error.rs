//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounds: lo {lo} > hi {hi}")]
    InvalidBounds { lo: f64, hi: f64 },

    #[error("linear solver did not converge within {iterations} iterations (residual {residual:e}, tolerance {tolerance:e})")]
    SolverFailure {
        iterations: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("grid mismatch: expected n={expected}, got n={actual}")]
    GridMismatch { expected: usize, actual: usize },

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
