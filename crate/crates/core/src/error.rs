use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("unknown graph input `{0}`")]
    UnknownInput(String),

    #[error("{path}: bad magic (expected {expected:?})")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{path}: unsupported version {found} (expected {expected})")]
    VersionMismatch { path: PathBuf, found: u32, expected: u32 },

    #[error("{path}: truncated payload (expected {expected} bytes, found {found})")]
    Truncated { path: PathBuf, expected: usize, found: usize },

    #[error("{path}: malformed WAV: {detail}")]
    MalformedWav { path: PathBuf, detail: String },

    #[error("{path}: WAV has {channels} channels, only mono is supported")]
    StereoWav { path: PathBuf, channels: u16 },

    #[error("{path}: unsupported WAV encoding: {detail}")]
    CompressedWav { path: PathBuf, detail: String },

    #[error("{path}:{line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint section `{0}` failed its integrity digest")]
    Integrity(String),

    #[error("checkpoint was written for config hash {found}, current config hashes to {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("non-finite loss on sequence `{sequence}` at step {step}")]
    NonFiniteLoss { sequence: String, step: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
