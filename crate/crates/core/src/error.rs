//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape disagreement between tensors or between a tensor and an operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A parameter or configuration value outside its legal range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// NaN or Inf encountered where finite values are required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Input data failed a semantic check (non-one-hot target, NaN in a
    /// grid that must be preprocessed, non-binary mask, ...).
    #[error("validation failed: {0}")]
    Validation(String),

    /// Malformed binary file; `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    /// Dataset assembly could not satisfy the requested composition.
    #[error("dataset assembly failed: {0}")]
    Assembly(String),

    /// Weight transfer between models failed on the named layer.
    #[error("weight transfer failed on layer '{layer}': {detail}")]
    Transfer { layer: String, detail: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}
