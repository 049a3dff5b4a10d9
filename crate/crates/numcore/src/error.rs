use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("batch norm in train mode needs at least 2 values per channel, got {0}")]
    BatchTooSmall(usize),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NumError {
    NumError::Shape {
        op,
        detail: detail.into(),
    }
}
