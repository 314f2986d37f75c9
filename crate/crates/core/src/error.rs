use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the portrait pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed schema document: {0}")]
    MalformedSchema(String),
    #[error("duplicate attribute type `{0}`")]
    DuplicateType(String),
    #[error("duplicate value `{value}` under attribute type `{ty}`")]
    DuplicateValue { ty: String, value: String },
    #[error("attribute type `{0}` must list at least two values")]
    TooFewValues(String),
    #[error("unknown attribute type `{0}`")]
    UnknownType(String),
    #[error("unknown value `{value}` for attribute type `{ty}`")]
    UnknownValue { ty: String, value: String },
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("embedding table has no vector for {ty}={value}")]
    MissingEmbedding { ty: String, value: String },
    #[error("archive error: {0}")]
    Archive(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("checkpoint was trained with schema {found}, refusing to load against schema {expected}")]
    SchemaMismatch { expected: String, found: String },
    #[error("manifest record {index}: {message}")]
    Manifest { index: usize, message: String },
    #[error("non-finite loss at epoch {epoch}, step {step}: {report}")]
    NonFiniteLoss { epoch: u64, step: u64, report: String },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad user input (documents, attributes,
    /// manifests) as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NonFiniteLoss { .. } | Error::Io { .. } | Error::Image(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
