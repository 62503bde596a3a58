use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad schedule bounds, architecture, reward spec, etc.
    #[error("configuration error: {0}")]
    Config(String),

    /// A call received arguments that violate its contract (shape, range).
    #[error("argument error: {0}")]
    Argument(String),

    /// Non-finite values or a numerically ill-posed computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// The operation is not permitted in the current state (e.g. updating frozen weights).
    #[error("state error: {0}")]
    State(String),

    #[error("i/o error: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::State(_) | Error::Serde(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io { .. } => 4,
        }
    }
}
