use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Checkpoint,
    Io,
    Internal,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("task `{0}` is already registered")]
    DuplicateTask(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("{}: {reason}", location(.path, .line))]
    Data {
        path: Option<PathBuf>,
        line: Option<usize>,
        reason: String,
    },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint payload: {0}")]
    CorruptPayload(String),

    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn location(path: &Option<PathBuf>, line: &Option<usize>) -> String {
    match (path, line) {
        (Some(p), Some(l)) => format!("{}:{}", p.display(), l),
        (Some(p), None) => p.display().to_string(),
        (None, Some(l)) => format!("line {l}"),
        (None, None) => "data".to_string(),
    }
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn data(reason: impl Into<String>) -> Self {
        Error::Data {
            path: None,
            line: None,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a file location to a data error; other variants pass through.
    pub fn at(self, path: impl Into<PathBuf>, line: Option<usize>) -> Self {
        match self {
            Error::Data { reason, .. } => Error::Data {
                path: Some(path.into()),
                line,
                reason,
            },
            Error::Json(e) => Error::Data {
                path: Some(path.into()),
                line,
                reason: e.to_string(),
            },
            other => other,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config { .. } | Error::DuplicateTask(_) => ErrorKind::Config,
            Error::Data { .. }
            | Error::UnknownTask(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Empty(_) => ErrorKind::Data,
            Error::NonFinite(_) | Error::UndefinedMetric(_) => ErrorKind::Numeric,
            Error::CheckpointVersion { .. }
            | Error::CorruptPayload(_)
            | Error::CheckpointMismatch(_) => ErrorKind::Checkpoint,
            Error::Io { .. } => ErrorKind::Io,
            Error::Shape(_) | Error::OutOfRange(_) => ErrorKind::Internal,
        }
    }
}
