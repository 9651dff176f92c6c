//! Single-object grid detector: target encoding, the three-part loss,
//! decoding, a small trainable convolutional network, and SGD training.

pub mod encoding;
pub mod loss;
pub mod net;
pub mod train;

use thiserror::Error;

use crate::bbox::BoundingBox;
use crate::image::ImageError;

pub use crate::bbox::iou;
pub use encoding::{decode_prediction, encode_target, Decoded, GridEncoding, GridSpec};
pub use loss::{loss, responsible_slot, LossOutput, LossWeights};
pub use net::{ArchConfig, Scalar, TinyNet, Trace};
pub use train::{detect, image_to_input, train, write_loss_csv, Checkpoint, EpochLog, TrainConfig, TrainSample};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("box {0:?} is outside the unit square")]
    BoxOutOfRange(BoundingBox),
    #[error("non-finite prediction")]
    NonFiniteInput,
    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("loss became non-finite in epoch {0}")]
    DivergenceDetected(usize),
    #[error("checkpoint schema version {0} is not supported")]
    SchemaVersion(u32),
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ImageError),
}
