use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter {0} is not recorded on this tape")]
    NotOnTape(String),

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("partial spec incompatible with model: {0}")]
    IncompatibleSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("token id {id} is reserved or out of range (vocab size {vocab_size})")]
    ReservedToken { id: u32, vocab_size: usize },

    #[error("zero-norm pooled vector for {0}")]
    ZeroNorm(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
