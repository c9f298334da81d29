use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("label {label} out of range for {k} classes")]
    LabelOutOfRange { label: u32, k: usize },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("mode {0} requires a labeled batch")]
    MissingLabels(String),

    #[error("patch size {patch} exceeds image {index} ({height}x{width})")]
    PatchTooLarge {
        patch: usize,
        index: usize,
        height: usize,
        width: usize,
    },

    #[error("non-finite training loss {loss} at step {step}")]
    Divergence { step: usize, loss: f64 },

    #[error("gradient set mismatch: {0}")]
    GradientMismatch(String),

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported feature: {0}")]
    Unsupported(String),

    #[error("too few patches: need at least {needed}, found {found}")]
    TooFewPatches { needed: usize, found: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl std::fmt::Debug,
        found: impl std::fmt::Debug,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: format!("{expected:?}"),
            found: format!("{found:?}"),
        }
    }
}
