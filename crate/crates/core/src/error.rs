use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box for record `{id}`: {reason}")]
    InvalidBBox { id: String, reason: String },

    #[error("duplicate image id `{0}`")]
    DuplicateId(String),

    #[error("unknown image id `{0}`")]
    UnknownId(String),

    #[error("crop {crop:?} does not fit inside a {height}x{width} image")]
    CropOutOfBounds {
        crop: crate::augmentation::CropParams,
        height: usize,
        width: usize,
    },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at step {step} for pairs {pairs:?}")]
    NonFiniteLoss { step: u64, pairs: Vec<(String, String)> },

    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("failed to read image `{path}`: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            reason: reason.into(),
        }
    }
}
