use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the distillation pipeline.
///
/// The CLI maps these onto distinct exit codes: configuration problems,
/// I/O failures, and contract/validation violations are separated so the
/// pipeline is scriptable from CI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid input data or parameter (bad extent, zero-width layer, ...).
    #[error("validation: {0}")]
    Validation(String),

    /// A caller broke an operation's contract (shape mismatch, empty mask,
    /// missing text-aligned teacher, ...).
    #[error("contract: {0}")]
    Contract(String),

    /// Configuration file problem; the message names the offending key.
    #[error("config: {0}")]
    Config(String),

    /// Rejection sampling could not satisfy a separation constraint.
    #[error("capacity: {0}")]
    Capacity(String),

    /// Malformed binary artifact; `offset` is the byte position where
    /// parsing failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
