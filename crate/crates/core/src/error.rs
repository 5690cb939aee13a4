use crate::model::TaskId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("empty output: input length {len} is shorter than kernel {kernel}")]
    EmptyOutput { len: usize, kernel: usize },

    #[error("waveform too short: {len} samples, frontend needs at least {min}")]
    WaveformTooShort { len: usize, min: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("task {0} is not registered")]
    MissingTask(TaskId),

    #[error("task {0} is already registered")]
    DuplicateTask(TaskId),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("strategy mismatch: model was built for {expected}, got {got}")]
    StrategyChange { expected: String, got: String },

    #[error("degenerate utterance: a single masked frame cannot supply distractors")]
    DegenerateUtterance,

    #[error("batch has no usable masked frames; increase utterance length or mask probability")]
    NoMaskedFrames,

    #[error("target of length {target_len} cannot be aligned to {frames} frames (needs {needed})")]
    UnrealizableTarget { target_len: usize, frames: usize, needed: usize },

    #[error("word error rate needs a non-empty reference")]
    EmptyReference,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checksum mismatch in record `{0}`")]
    Checksum(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint config hash {found} does not match {expected}")]
    ConfigHash { found: String, expected: String },

    #[error("manifest mismatch: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }
}
