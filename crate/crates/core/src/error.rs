use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("storage error at {path}: {reason}")]
    Storage { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("fetch error for {url}: {reason}")]
    Fetch { url: String, reason: String },

    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("refusing to overwrite {0} (pass --force)")]
    WouldOverwrite(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn storage(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Storage {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
