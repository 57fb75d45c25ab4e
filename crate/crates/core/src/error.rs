use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in `{operand}`: expected {expected}, found {found}")]
    DimensionMismatch {
        operand: String,
        expected: usize,
        found: usize,
    },

    #[error("matrix `{name}` is not positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { name: String, min_eigenvalue: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("batch generation: {0}")]
    Batch(String),

    #[error("index {index} out of range for {what} (len {len})")]
    IndexOutOfRange {
        what: String,
        index: usize,
        len: usize,
    },

    #[error("{0}")]
    Evaluation(String),

    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("{path}: {reason}")]
    Format { path: String, reason: String },

    #[error("unsupported {what} version `{found}` (expected {expected})")]
    Version {
        what: String,
        found: String,
        expected: u32,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(operand: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            operand: operand.into(),
            expected,
            found,
        }
    }

    pub(crate) fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for this error: 2 for IO/parse failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::Format { .. } | Error::Version { .. } => 2,
            _ => 1,
        }
    }
}
