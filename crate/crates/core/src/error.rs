use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library can surface.
///
/// Variants are grouped by the process exit code the CLI maps them to,
/// see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: row {row} has zero norm")]
    ZeroNorm { op: &'static str, row: usize },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("bad magic bytes at offset {offset}")]
    BadMagic { offset: u64 },

    #[error("archive truncated at offset {offset}: need {needed} more bytes")]
    Truncated { offset: u64, needed: u64 },

    #[error("archive header at offset {offset}: {message}")]
    Header { offset: u64, message: String },

    #[error("tensor `{name}` at offset {offset}: declared {expected} bytes, found {actual}")]
    SizeMismatch {
        name: String,
        offset: u64,
        expected: u64,
        actual: u64,
    },

    #[error("tensor `{name}` at offset {offset} holds a non-finite value")]
    NonFiniteTensor { name: String, offset: u64 },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for I/O and file-format failures, 2 for usage and configuration
    /// problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::Header { .. }
            | Error::SizeMismatch { .. }
            | Error::NonFiniteTensor { .. }
            | Error::Input(_) => 1,
            Error::Shape { .. }
            | Error::InvalidShape { .. }
            | Error::MissingTensor(_)
            | Error::Config(_)
            | Error::Json(_) => 2,
            Error::ZeroNorm { .. } | Error::NonFinite { .. } | Error::Degenerate(_) => 3,
        }
    }
}
