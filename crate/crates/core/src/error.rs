use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the fusion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite feature {feature} in sample {sample}")]
    NonFiniteFeature { sample: usize, feature: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("divergence at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("empty measurements")]
    EmptyMeasurements,

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated or malformed checkpoint: {0}")]
    TruncatedCheckpoint(String),

    #[error("shape inconsistency: {0}")]
    ShapeInconsistency(String),

    #[error("rank {requested} exceeds the maximum {max} for this snapshot matrix")]
    RankTooLarge { requested: usize, max: usize },

    #[error("ill-conditioned kernel matrix")]
    IllConditioned,

    #[error("unknown section id {0}")]
    UnknownSection(u32),

    #[error("malformed csv {path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
