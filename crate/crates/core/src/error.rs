//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up; names the offending dimensions.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("label out of range: {0} (expected 0 or 1)")]
    LabelOutOfRange(i64),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset contains a single class only: {0}")]
    SingleClass(String),

    #[error("duplicate image id: {0}")]
    DuplicateImageId(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step}; last finite loss {last_finite_loss}")]
    TrainingDiverged { step: usize, last_finite_loss: f64 },

    #[error("pixel value out of range: {0}")]
    PixelOutOfRange(String),

    #[error("patch placement out of bounds: {0}")]
    PlacementOutOfBounds(String),

    #[error("degenerate patch: {0}")]
    DegeneratePatch(String),

    #[error("image id already registered: {0}")]
    AlreadyRegistered(String),

    #[error("malformed image file: {0}")]
    MalformedImage(String),

    #[error("malformed manifest: {0}")]
    MalformedManifest(String),

    #[error("malformed container: {0}")]
    MalformedContainer(String),

    #[error("malformed report: {0}")]
    MalformedReport(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
