use thiserror::Error;

use crate::executor::Transcript;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    /// A backend failed mid-dialogue; `partial` holds everything committed before the failure.
    #[error("execution failed for agent {agent_id} in round {round}: {source}")]
    Execution {
        agent_id: usize,
        round: usize,
        partial: Box<Transcript>,
        #[source]
        source: Box<Error>,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
