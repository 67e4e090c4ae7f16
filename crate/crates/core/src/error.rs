//! Error type shared by all pipeline stages.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("invalid config value for `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("mask error: {0}")]
    Mask(String),

    #[error("loss error: {0}")]
    Loss(String),

    #[error("extractor `{name}` unavailable: {reason}")]
    ExtractorUnavailable { name: String, reason: String },

    #[error("unknown extractor `{name}` (registered: {known})")]
    UnknownExtractor { name: String, known: String },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
