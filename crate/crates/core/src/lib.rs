//! Cloud segmentation of lidar time-height imagery.
//!
//! The crate covers the whole pipeline at desk or full scale: a dense-tensor
//! autodiff engine, the layer vocabulary of the two networks, a synthetic
//! lidar day generator with a slope-based baseline detector, the quartering
//! and normalization preprocessing, classifier/segmenter builders with
//! weight transfer, the three-stage training procedure with hyperparameter
//! search, and dataset-level precision/recall/F1 evaluation.

pub mod autodiff;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod kernels;
pub mod lidar;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod preprocess;
pub mod render;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Padding, Phase, TensorId};
pub use error::{Error, Result};
pub use tensor::Tensor;
