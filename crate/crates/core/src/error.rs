//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite parameters")]
    NonFiniteParams,
    #[error("non-finite value in {term}")]
    NonFinite { term: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("degenerate history")]
    DegenerateHistory,
    #[error("degenerate task")]
    DegenerateTask,
    #[error("not at episode boundary")]
    NotAtEpisodeBoundary,
    #[error("non-positive-definite covariance")]
    NotPositiveDefinite,
    #[error("enumeration infeasible: vocab size {0} too large")]
    EnumerationInfeasible(usize),
    #[error("non-normalized probability table (sum = {0})")]
    NonNormalizedTable(f64),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training aborted at step {step}: {reason}")]
    StepAbort { step: u64, reason: String },
    #[error("empty sequence")]
    EmptySequence,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
