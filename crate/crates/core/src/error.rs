use thiserror::Error;

/// Errors raised across the model, losses, and harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("input too short: need at least {min} frames, got {got}")]
    InputTooShort { min: usize, got: usize },

    #[error("sample {sample}: CTC target of length {target_len} needs at least {needed} frames, got {input_len}")]
    InfeasibleTarget {
        sample: usize,
        target_len: usize,
        input_len: usize,
        needed: usize,
    },

    #[error("blob `{name}` shape mismatch: checkpoint has {source_shape:?}, model expects {target_shape:?}")]
    BlobShapeMismatch {
        name: String,
        source_shape: Vec<usize>,
        target_shape: Vec<usize>,
    },

    #[error("checkpoint config hash {found:016x} does not match model config {expected:016x}")]
    ConfigHashMismatch { expected: u64, found: u64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("non-finite loss at step {step} (batch {batch_id}): {detail}")]
    NonFiniteLoss {
        step: usize,
        batch_id: usize,
        detail: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("corpus spec error: {0}")]
    CorpusSpec(String),

    #[error("unknown layer kind `{0}`")]
    UnknownLayer(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use contract_err;
pub(crate) use shape_err;
