use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("backward requires a single-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { id: u32, vocab: usize },

    #[error("{0}: cannot L2-normalize a zero vector")]
    ZeroNorm(&'static str),

    #[error("bounding box has zero area: {0}")]
    ZeroAreaBox(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss bundle has no components")]
    EmptyBundle,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training aborted at step {step}: non-finite total loss")]
    NonFiniteLoss { step: usize },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
