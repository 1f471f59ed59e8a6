use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {actual})")]
    Shape {
        what: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite activation in {stage} (layer {layer})")]
    NonFinite { stage: &'static str, layer: usize },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("degenerate aggregation: attention row {part} sums to {sum}")]
    DegenerateAggregation { part: usize, sum: f64 },

    #[error("invalid label {label} for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },

    #[error("empty gallery")]
    EmptyGallery,

    #[error("invalid cutoff: recall@{0} is undefined")]
    InvalidCutoff(usize),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint/config mismatch on field `{field}`: checkpoint has {checkpoint}, config has {config}")]
    CheckpointMismatch {
        field: String,
        checkpoint: String,
        config: String,
    },

    #[error("non-finite loss at step {step} (batch samples {batch_ids:?})")]
    NonFiniteLoss { step: u64, batch_ids: Vec<String> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        what: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            what: what.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
