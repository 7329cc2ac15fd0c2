use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("ODE state became non-finite at step {step}")]
    NonFiniteState { step: usize },

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("context overflow: {len} tokens exceed max_seq_len {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("bad magic in {path:?}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("controlled-experiment contract violated: {0}")]
    Contract(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
