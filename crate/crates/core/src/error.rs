use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate hips in frame {frame} (person {person}): hip distance {distance:e}")]
    DegenerateHips { person: usize, frame: usize, distance: f64 },

    #[error("empty sequence")]
    EmptySequence,

    #[error("required joint `{0}` is not in the kept set")]
    MissingRequiredJoint(String),

    #[error("invalid joint layout: {0}")]
    InvalidLayout(String),

    #[error("skeleton graph is disconnected ({reached} of {total} joints reachable)")]
    DisconnectedGraph { reached: usize, total: usize },

    #[error("clip has no frames")]
    EmptyClip,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("unknown layer kind `{0}`")]
    UnknownLayer(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint fingerprint mismatch: checkpoint has {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("image error in {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("io error at {path}: {source}")]
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

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
