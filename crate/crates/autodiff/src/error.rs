use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// Operand shapes are incompatible; `detail` names the offending axes.
    #[error("{op}: dimension error: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("batch_norm: degenerate batch, {count} value(s) per channel in train mode (need >= 2)")]
    DegenerateBatch { count: usize },

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward: tape already consumed")]
    TapeConsumed,

    #[error("backward: tape is empty")]
    EmptyTape,

    #[error("{op}: variables belong to different tapes")]
    TapeMismatch { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension { op, detail: detail.into() })
}
