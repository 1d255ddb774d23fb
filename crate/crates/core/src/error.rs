use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),

    /// A backward rule produced NaN or infinity.
    #[error("non-finite gradient from op record #{record} ({op})")]
    NonFiniteGradient { record: usize, op: &'static str },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteParameterGradient(String),

    #[error("index {index} out of range for table of {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
