use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. `Config` variants map to CLI exit code 2,
/// everything else to exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: left {left:?} vs right {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("non-finite value produced in {context}")]
    NonFinite { context: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid label {label} at row {row}: class count is {classes}")]
    InvalidLabel {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("cue geometry infeasible: {0}")]
    CueGeometry(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("bad file format in {path}: {reason}")]
    BadFormat { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user-supplied configuration.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::CueGeometry(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
