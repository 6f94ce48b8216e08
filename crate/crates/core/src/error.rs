use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("softmax row {row} has no unmasked position")]
    DegenerateRow { row: usize },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("signal too short: {len} samples, need at least {min}")]
    Length { len: usize, min: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("format error: {0}")]
    Format(String),
    #[error("parse error in {} at row {row}, column {column}: {message}", file.display())]
    Parse {
        file: PathBuf,
        row: usize,
        column: usize,
        message: String,
    },
    #[error("normalization spec error: {0}")]
    Spec(String),
    #[error("loss undefined: no masked positions")]
    UndefinedLoss,
    #[error("training failed at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },
    #[error("degenerate class composition: {0}")]
    DegenerateClass(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("checkpoint corrupted: {0}")]
    Corruption(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint holds {found:?}, expected {expected}")]
    ManifestType { expected: String, found: Vec<String> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
