use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller passed an argument outside the documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An internal contract between modules was violated.
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// A config document failed validation; the message names the key.
    #[error("config error: {0}")]
    Config(String),

    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
