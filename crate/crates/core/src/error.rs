use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed prompt template {template:?}: expected exactly one `<c>` placeholder, found {found}")]
    InvalidTemplate { template: String, found: usize },

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("background id {0:?} collides with a category id")]
    BackgroundCollision(String),

    #[error("vocabulary already contains the background class")]
    AlreadyExpanded,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("adapter failure ({context}): {message}")]
    Adapter { context: String, message: String },

    #[error("every mask proposal is empty")]
    EmptyProposals,

    #[error("mask is empty at feature resolution")]
    EmptyMask,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("feature space {0:?} missing")]
    MissingSpace(String),

    #[error("unknown category {0:?}")]
    UnknownCategory(String),

    #[error("bank is missing categories: {}", .0.join(", "))]
    MissingCategories(Vec<String>),

    #[error("checksum mismatch in {}", .0.display())]
    Checksum(PathBuf),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed file {}: {message}", .path.display())]
    Format { path: PathBuf, message: String },

    #[error("nothing to evaluate: no labelled pixels")]
    EmptyEval,

    #[error("feature backend {0:?} is not available in this build")]
    BackendUnavailable(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error("png decoding: {0}")]
    PngDecode(#[from] png::DecodingError),

    #[error("png encoding: {0}")]
    PngEncode(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn adapter(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Adapter { context: context.into(), message: message.to_string() }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}
