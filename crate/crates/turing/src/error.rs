use std::path::PathBuf;

use thiserror::Error;

use crate::design::{Truth, TumorType};

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("not enough {truth} {tumor_type} cases: need {need}, have {have}")]
    InsufficientPool {
        tumor_type: TumorType,
        truth: Truth,
        need: usize,
        have: usize,
    },

    #[error("unknown case {0}")]
    UnknownCase(String),

    #[error("unknown session {0}")]
    UnknownSession(String),

    #[error("session {0} is closed")]
    SessionClosed(String),

    #[error("session {0} is still open")]
    SessionOpen(String),

    #[error("no completed sessions")]
    NoCompletedSessions,

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(#[from] freetumor_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
