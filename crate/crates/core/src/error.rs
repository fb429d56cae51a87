use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent caller input.
    #[error("input error: {0}")]
    Input(String),

    /// Input outside the mathematical domain of the operation (zero norm, n < 2, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A backend returned data that breaks its own declared contract.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },

    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },

    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("state error: {0}")]
    State(String),

    #[error("storage error: {0}")]
    Storage(#[from] io::Error),

    #[error("backend failure in batch {batch}: {source}")]
    Batch {
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stream interrupted after {completed} completed batch(es): {source}")]
    StreamInterrupted {
        completed: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn in_batch(self, batch: usize) -> Self {
        Error::Batch {
            batch,
            source: Box::new(self),
        }
    }

    /// Whether a retry could plausibly succeed. Only transport-level faults qualify.
    pub fn is_transient(&self) -> bool {
        matches!(self, Error::Transport { .. } | Error::Timeout { .. })
    }

    /// Innermost error, skipping batch/stream context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Batch { source, .. } | Error::StreamInterrupted { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format {
            line: e.line(),
            message: e.to_string(),
        }
    }
}
