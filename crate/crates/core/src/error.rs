use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ArtemisError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ArtemisError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("expected 3 colour channels, got {0}")]
    ChannelCount(usize),

    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("empty dataset: no usable images under {0}")]
    EmptyDataset(PathBuf),

    #[error("unknown block `{0}`; expected one of none, block1_conv1 .. block5_conv1")]
    UnknownBlock(String),

    #[error("failed to load VGG weights from {path}: {reason}")]
    WeightLoad { path: PathBuf, reason: String },

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("numeric degeneracy: {0}")]
    Degenerate(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint integrity check failed for {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ArtemisError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input rather than a failure during compute.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::UnknownBlock(_) | Self::EmptyDataset(_) | Self::Version { .. }
        )
    }
}
