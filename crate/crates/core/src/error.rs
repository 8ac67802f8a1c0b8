//! Error type shared across the workspace.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// A NaN or non-finite value was produced. Any op that produces one
    /// aborts instead of letting it propagate into later measurements.
    #[error("numeric failure in {context}: non-finite value")]
    NonFinite { context: String },

    /// Invalid configuration (schedules, growth plans, run configs).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid schedule descriptor or schedule/model mismatch.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// Task generation or resolution failure.
    #[error("task error: {0}")]
    Task(String),

    /// Evaluation protocol violation (context overflow, empty sets, ...).
    #[error("eval error: {0}")]
    Eval(String),

    /// Autodiff misuse (loss not scalar, var from another tape, ...).
    #[error("tape error: {0}")]
    Tape(String),

    /// A diagnostic hit a degenerate case it refuses to normalize away.
    #[error("degenerate diagnostic: {0}")]
    Degenerate(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
