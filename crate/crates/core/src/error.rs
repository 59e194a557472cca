use std::path::PathBuf;

/// Errors raised by the detection pipeline and its tooling.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// Input data has the wrong shape or content for the requested operation.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// An argument is outside its admissible set.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A value is in the wrong state (e.g. an unnormalized feature map).
    #[error("invalid state: {0}")]
    InvalidState(String),
    /// Missing or inconsistent configuration (weights, models, paths).
    #[error("configuration error: {0}")]
    Config(String),
    /// An annotation or manifest could not be read.
    #[error("ingestion error in {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },
    /// A checkpoint file is malformed or has an unsupported version.
    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    /// No prediction file found a ground-truth partner.
    #[error("no prediction in {pred_dir} pairs with ground truth in {gt_dir}")]
    EmptyPairing { pred_dir: PathBuf, gt_dir: PathBuf },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid_input(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn invalid_argument(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
