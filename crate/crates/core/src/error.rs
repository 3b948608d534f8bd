use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("corrupt corpus: {0}")]
    CorruptCorpus(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Parameter shapes disagree between a checkpoint and its import target.
    /// `names` is ordered by the target's parameter order; the first entry is the first bad tensor.
    #[error("shape mismatch in {} tensor(s), first: {}", names.len(), names.first().map(String::as_str).unwrap_or("?"))]
    ShapeMismatch { names: Vec<String> },

    #[error("non-finite loss at iteration {iteration} (seed {seed}, batch ids {batch_ids:?})")]
    NonFiniteLoss {
        iteration: u64,
        seed: u64,
        batch_ids: Vec<String>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Attach a path to `std::io::Result`s.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
