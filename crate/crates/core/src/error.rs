use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty volume")]
    EmptyVolume,

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid dims {dims:?}: {reason}")]
    InvalidDims { dims: Vec<usize>, reason: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("expected {expected:?} volume, got {actual:?}")]
    WrongModality {
        expected: crate::Modality,
        actual: crate::Modality,
    },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("token id {0} is not a value token")]
    NotAValueToken(u32),

    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfVocab { id: u32, vocab: usize },

    #[error("NaN cannot be quantized (index {index})")]
    NanInput { index: usize },

    #[error("mask plan is empty")]
    EmptyMask,

    #[error("bad magic in {what}")]
    BadMagic { what: &'static str },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("dim/payload mismatch: header declares {declared} voxels, payload holds {found}")]
    DimPayloadMismatch { declared: usize, found: usize },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported checkpoint version {found} (this build reads {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("divergence at step {step}: loss {loss} exceeds 1000x initial {initial}")]
    Diverged { step: u64, loss: f64, initial: f64 },

    #[error("no training data")]
    NoData,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
