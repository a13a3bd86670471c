use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("source at ({x}, {y}) lies outside the domain")]
    SourceOutsideDomain { x: f64, y: f64 },

    #[error("solver produced a non-finite state at step {step} (max |phi| = {max_abs:e})")]
    SolverDiverged { step: usize, max_abs: f64 },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("hash mismatch: {0}")]
    HashMismatch(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("unknown scenario id {0}")]
    UnknownScenario(usize),

    #[error("training halted: {0}")]
    TrainingHalted(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),

    #[error("image encoding failed: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
