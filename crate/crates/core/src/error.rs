use std::path::PathBuf;

use crate::tensor::DType;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two shapes disagree along a named axis.
    #[error("dimension mismatch on {axis}: {msg}")]
    Dim { axis: &'static str, msg: String },

    #[error("dtype mismatch: {lhs:?} vs {rhs:?}")]
    DType { lhs: DType, rhs: DType },

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Autodiff or optimizer used out of order.
    #[error("state error: {0}")]
    State(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A reprojected point coincides with the target camera center.
    #[error("degenerate point: reprojected point lies at the target camera center")]
    DegeneratePoint,

    #[error("degenerate prediction: {0}")]
    DegeneratePrediction(String),

    #[error("empty batch: {0}")]
    EmptyBatch(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("ingestion error in {path}: {msg}")]
    Ingestion { path: PathBuf, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(axis: &'static str, msg: impl Into<String>) -> Self {
        Error::Dim { axis, msg: msg.into() }
    }

    pub fn ingest(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Ingestion { path: path.into(), msg: msg.into() }
    }

    /// True for errors caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Image(image::ImageError::IoError(_)))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
