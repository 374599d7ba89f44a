//! Error types shared across the engine.

use thiserror::Error;

/// Process exit code for contract violations.
pub const EXIT_CONTRACT: i32 = 1;
/// Process exit code for I/O and parse failures.
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Error)]
pub enum SdgError {
    /// An operation was invoked outside its contract (shape mismatch,
    /// invalid argument, out-of-range parameter).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value left the mathematical domain of an operation
    /// (log of a non-positive number, zero-norm embedding).
    #[error("domain error: {0}")]
    Domain(String),

    /// A file failed to parse; `offset` is the byte position of the problem.
    #[error("parse error in {path} at byte {offset}: {message}")]
    Parse {
        path: String,
        offset: u64,
        message: String,
    },

    /// A config file failed to parse; `line` is 1-based.
    #[error("config error in {path} line {line}: {message}")]
    Config {
        path: String,
        line: usize,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SdgError {
    pub fn contract(msg: impl Into<String>) -> Self {
        SdgError::Contract(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        SdgError::Domain(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SdgError::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code class: 1 for contract/domain violations, 2 for
    /// I/O and parse errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            SdgError::Contract(_) | SdgError::Domain(_) => EXIT_CONTRACT,
            SdgError::Parse { .. } | SdgError::Config { .. } | SdgError::Io { .. } => EXIT_IO,
        }
    }
}

pub type Result<T> = std::result::Result<T, SdgError>;
