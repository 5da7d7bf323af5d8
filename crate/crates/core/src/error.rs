use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label sequence is empty")]
    EmptyLabels,
    #[error("unknown label {0}")]
    UnknownLabel(String),
    #[error("silence label {0} must not appear in a transcription")]
    SilenceInTranscription(String),
    #[error("infeasible lattice: {frames} frames cannot cover {states} states")]
    Infeasible { states: usize, frames: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("instance too large for enumeration: {0} paths")]
    TooLarge(u128),
    #[error("pronunciation mismatch between alignments of {0}")]
    PronunciationMismatch(String),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite loss for utterance {0}")]
    NonFiniteLoss(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
