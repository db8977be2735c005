use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("place {place_id} has {count} images, at least {required} required")]
    TooFewImages {
        place_id: u64,
        count: usize,
        required: usize,
    },

    #[error("duplicate image {image_ref:?} in place {place_id}")]
    DuplicateImage { place_id: u64, image_ref: String },

    #[error("duplicate place id {0}")]
    DuplicatePlace(u64),

    #[error("places {0} and {1} fall in the same grid cell")]
    SharedCell(u64, u64),

    #[error("batch needs {required} places with at least {per_place} images, only {available} eligible")]
    NotEnoughPlaces {
        required: usize,
        per_place: usize,
        available: usize,
    },

    #[error("invalid batch spec: {0}")]
    InvalidBatchSpec(String),

    #[error("missing feature payload for image {0:?}")]
    MissingPayload(String),

    #[error("vector norm {0:e} is too small to normalize")]
    ZeroNorm(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("embeddings are not unit-norm (row {row} has norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("ground truth: {0}")]
    GroundTruth(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
