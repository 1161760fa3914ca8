use thiserror::Error;

use crate::linalg::LinalgError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("episode sampling infeasible: {0}")]
    Sampling(String),

    #[error("evaluation aborted after {completed} of {requested} trials: {source}")]
    EvalAborted {
        completed: usize,
        requested: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite gradient for parameter `{param}`")]
    Gradient { param: String },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("ingestion failed at byte {offset}: {reason}")]
    Ingest { offset: u64, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse error classes, used by the CLI to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Io,
    Numerical,
    Sampling,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Argument(_) | Error::Config(_) | Error::Generation(_) => ErrorClass::Config,
            Error::Io(_) | Error::Json(_) | Error::Ingest { .. } | Error::Checkpoint(_) => {
                ErrorClass::Io
            }
            Error::Linalg(_) | Error::Gradient { .. } | Error::Divergence { .. } => {
                ErrorClass::Numerical
            }
            Error::Sampling(_) => ErrorClass::Sampling,
            Error::EvalAborted { source, .. } => source.class(),
        }
    }
}
