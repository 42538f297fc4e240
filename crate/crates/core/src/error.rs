use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("distribution is not normalized (sum = {sum})")]
    NotNormalized { sum: f64 },

    #[error("power constraint violated: max z_i^2 = {max_sq} exceeds P = {power}")]
    PowerViolation { max_sq: f64, power: f64 },

    #[error("Rayleigh channel requires a fading coefficient")]
    MissingFading,

    #[error("degenerate representation covariance: {0}")]
    DegenerateCovariance(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {reason}")]
    Diverged {
        epoch: usize,
        batch: usize,
        reason: String,
        snapshot: Box<DivergenceSnapshot>,
    },

    #[error("data error in {path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("label mismatch: label {label:?} does not appear in the training labels")]
    LabelMismatch { label: String },

    #[error("architecture mismatch: {}", .0.join("; "))]
    ArchitectureMismatch(Vec<String>),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// State captured when the training loss stops being finite.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DivergenceSnapshot {
    pub epoch: usize,
    pub batch: usize,
    pub sigma2: f64,
    pub lambda: f64,
    pub last_finite_loss: Option<f64>,
    pub max_abs_param: f64,
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
