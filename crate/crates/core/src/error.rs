use std::path::PathBuf;

/// Errors raised by the benchmark library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value at index {index}: {value}")]
    NonFinite { index: usize, value: f64 },

    #[error("not a probability vector: {0}")]
    NotSimplex(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stream corpus has no domain named `{0}`")]
    MissingDomain(String),

    #[error("class {0} is absent from the source subset")]
    MissingClass(usize),

    #[error("strategy {strategy} requires `{field}`, which is absent from the runs")]
    MissingField { strategy: String, field: String },

    #[error("augmentation failed on sample {index}: {reason}")]
    Augmentation { index: usize, reason: String },

    #[error("method `{method}` cannot run: {reason}")]
    MethodPrecondition { method: String, reason: String },

    #[error("plan validation failed: {0}")]
    Plan(String),

    #[error("results store is corrupt at {path}: {reason}")]
    CorruptStore { path: PathBuf, reason: String },

    #[error("malformed model state: {0}")]
    StateFormat(String),

    #[error("report input invalid: {0}")]
    Report(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("image decode error: {0}")]
    Image(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
