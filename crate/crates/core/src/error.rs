//! Error types shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, fitting, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// Too little data to carry out the operation (e.g. covariance from one row).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// A caller-supplied argument is out of range or inconsistent.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The data itself violates a model contract (non-finite entries,
    /// labels outside the family's support, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A function was evaluated outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical routine failed (eigen-solver breakdown, non-finite
    /// objective, singular factor, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Hyperparameters that cannot work (e.g. a truncation radius so small
    /// the prior sampler never accepts).
    #[error("configuration error: {0}")]
    Config(String),

    /// An optimization run diverged; carries a prefix of the objective trace.
    #[error("fit diverged: {msg}; trace prefix {trace_prefix:?}")]
    Divergence { msg: String, trace_prefix: Vec<f64> },

    /// A file could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
