use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the core pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: [usize; 3],
        actual: [usize; 3],
    },

    #[error("case {case}: non-finite voxel at index {index}")]
    NonFinite { case: String, index: usize },

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("case {case}: organ cannot host a tumor ({reason})")]
    OrganTooSmall { case: String, reason: String },

    #[error("infeasible phantom geometry: {0}")]
    InfeasibleGeometry(String),

    #[error("no tumor voxels in any labeled case")]
    NoTumorVoxels,

    #[error("overlapping ground-truth instances {0} and {1}")]
    OverlappingInstances(usize, usize),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("corrupt header in {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
