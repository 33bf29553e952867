use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Caller supplied an invalid configuration or argument.
    Usage,
    /// Input data or a stored artifact is missing, malformed or inconsistent.
    Data,
    /// Training produced a non-finite value.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: missing column `{column}`", path.display())]
    MissingColumn { path: PathBuf, column: String },

    #[error("{}: unexpected column `{column}`", path.display())]
    UnexpectedColumn { path: PathBuf, column: String },

    #[error("{}: line {line}: {reason}", path.display())]
    MalformedRow { path: PathBuf, line: u64, reason: String },

    #[error("{}: line {line}: label `{value}` is not 0 or 1", path.display())]
    InvalidLabel { path: PathBuf, line: u64, value: String },

    #[error("not enough days: need at least {required} distinct days, found {available}")]
    InsufficientDays { required: usize, available: usize },

    #[error("example {id}: index {index} of field {field} outside [0, {hash_dim})")]
    IndexOutOfRange {
        id: u64,
        field: usize,
        index: u32,
        hash_dim: usize,
    },

    #[error("field count mismatch: expected {expected}, got {got}")]
    FieldCountMismatch { expected: usize, got: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite gradient at parameter offset {offset}")]
    NonFiniteGradient { offset: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("snapshot checksum mismatch: manifest {expected}, payload {actual}")]
    ChecksumMismatch { expected: String, actual: String },

    #[error("snapshot descriptor mismatch: {0}")]
    DescriptorMismatch(String),

    #[error("truncated snapshot: expected {expected} bytes, found {found}")]
    TruncatedSnapshot { expected: usize, found: usize },

    #[error("invalid snapshot manifest: {0}")]
    InvalidManifest(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("missing teacher logit for example {id}")]
    MissingTeacher { id: u64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("example ids misaligned at position {position}: {left} vs {right}")]
    MisalignedIds { position: usize, left: u64, right: u64 },

    #[error("duplicate prediction log record for example {id} at snapshot version {version}")]
    DuplicateLogRecord { id: u64, version: u64 },

    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("write failed: {0}")]
    Write(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) => ErrorKind::Usage,
            Error::NonFiniteGradient { .. } | Error::NonFinite(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
