use std::path::PathBuf;

/// Errors produced across the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation was called with arguments that break its contract
    /// (shape mismatch, odd pooling size, invalid probability, ...).
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("failed to load audio {path}: {reason}")]
    AudioLoad { path: PathBuf, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid annotation: {0}")]
    Annotation(String),

    #[error("mel filter {index} has no positive weight (n_mels too large for the FFT resolution)")]
    EmptyMelFilter { index: usize },

    #[error("event placement: {0}")]
    Placement(String),

    #[error("checkpoint mismatch at record `{record}`: {detail}")]
    CheckpointMismatch { record: String, detail: String },

    #[error("malformed {kind} file: {detail}")]
    Format { kind: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Contract {
        op,
        detail: detail.into(),
    }
}
