use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("undefined confidence: {0}")]
    UndefinedConfidence(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category, used by the CLI and the C API.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Schema(_) => "schema",
            Error::Config(_) => "config",
            Error::Argument(_) => "argument",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Empty(_) => "empty",
            Error::UndefinedConfidence(_) => "undefined_confidence",
            Error::Checkpoint(_) => "checkpoint",
            Error::Dataset(_) => "dataset",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }

    /// Process exit code for the category; 0 is reserved for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_) => 2,
            Error::Config(_) => 3,
            Error::Argument(_) => 4,
            Error::Shape(_) => 5,
            Error::Numeric(_) => 6,
            Error::Empty(_) => 7,
            Error::UndefinedConfidence(_) => 8,
            Error::Checkpoint(_) => 9,
            Error::Dataset(_) => 10,
            Error::Io(_) => 11,
            Error::Json(_) => 12,
        }
    }
}

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::Shape(what.into())
}
