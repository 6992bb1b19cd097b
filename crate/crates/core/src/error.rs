use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid label {0}, expected 0..=3")]
    Label(usize),

    #[error("unsupported audio in {path}: {reason}")]
    Audio { path: PathBuf, reason: String },

    #[error("corrupt {kind} file: {reason}")]
    Corrupt { kind: &'static str, reason: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("backward called before forward in {0}")]
    MissingCache(&'static str),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn corrupt(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Corrupt {
            kind,
            reason: reason.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the command-line tool: 2 for data problems,
    /// 3 for numerical failures. Usage errors (1) are raised by argument
    /// parsing before any of these can occur.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            Error::Config(_) => 1,
            _ => 2,
        }
    }
}
