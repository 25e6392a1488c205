//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor/image shape disagreement, naming the offending dimension.
    #[error("{op}: {what} mismatch (expected {expected}, got {got})")]
    ShapeMismatch {
        op: &'static str,
        what: &'static str,
        expected: String,
        got: String,
    },

    #[error("{what} out of range: {value} ({expected})")]
    OutOfRange {
        what: String,
        value: f64,
        expected: &'static str,
    },

    #[error("{op}: image too small ({height}x{width})")]
    ImageTooSmall {
        op: &'static str,
        height: usize,
        width: usize,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("missing gradient for parameter '{name}'")]
    MissingGradient { name: String },

    #[error("checkpoint field '{field}': {reason}")]
    Checkpoint { field: String, reason: String },

    #[error("no usable images in {dir}")]
    EmptyInput { dir: PathBuf },

    #[error("dataset has {found} scene(s); at least {needed} required")]
    TooFewScenes { found: usize, needed: usize },

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: u64, diagnostics: String },

    #[error("unknown metric '{name}'")]
    UnknownMetric { name: String },

    #[error("invalid EV grid: {reason}")]
    InvalidEvGrid { reason: String },

    #[error("invalid config: {reason}")]
    InvalidConfig { reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode image {path}: {reason}")]
    ImageDecode { path: PathBuf, reason: String },

    #[error("failed to encode image {path}: {reason}")]
    ImageEncode { path: PathBuf, reason: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
