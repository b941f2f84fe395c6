use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode audio file {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("zero-length stem in {path}")]
    EmptyStem { path: PathBuf },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid dataset layout: {0}")]
    Layout(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("none of the {pool} tracks has at least {min_len} samples")]
    NoEligibleTrack { pool: usize, min_len: usize },

    #[error(
        "cannot place another window in track `{track_id}` without exceeding the overlap ratio"
    )]
    OverlapInfeasible { track_id: String },

    #[error("window from `{track_id}` has {active} usable stems, at least 2 are required")]
    TooFewStems { track_id: String, active: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown tag(s): {}", .0.join(", "))]
    UnknownTag(Vec<String>),

    #[error("invalid prompt: {0}")]
    Prompt(String),

    #[error("invalid task: {0}")]
    Task(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(
        "checkpoint {path} has format version {found}, this build supports version {supported}"
    )]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
