use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration, detected before any compute.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("models are not merge-compatible: {0}")]
    MergeCompat(String),

    /// Two activation matrices were collected over different token streams.
    #[error("activation matrices are not comparable: {0}")]
    Comparability(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite value in tensor `{tensor}` at step {step}")]
    NonFinite { tensor: String, step: u64 },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    /// Corrupt, truncated or foreign artifact file.
    #[error("invalid artifact {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("provider transport error (retriable): {0}")]
    Transport(String),

    #[error("provider protocol error: {message}; raw payload: {raw}")]
    Protocol { message: String, raw: String },

    #[error("no fixture recorded for request {key}")]
    MissingFixture { key: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::Transport(_))
    }
}

macro_rules! contract {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use contract;
