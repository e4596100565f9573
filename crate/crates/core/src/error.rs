//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point behind camera (z = {z:.6} m)")]
    BehindCamera { z: f64 },

    #[error("{path}:{line}: {msg}")]
    ParseLine {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown scene preset {name:?}; known presets: {known}")]
    UnknownPreset { name: String, known: String },

    #[error("bundle adjustment failed: {0}")]
    BundleAdjustment(String),

    #[error("keyframe window too small: need at least {need}, got {got}")]
    WindowTooSmall { need: usize, got: usize },

    #[error("too few trajectory associations: need at least {need}, got {got}")]
    TooFewAssociations { need: usize, got: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("image encode/decode: {0}")]
    Image(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
