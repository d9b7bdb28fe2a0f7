use std::path::PathBuf;

use crate::seqmodel::Token;

/// Errors raised anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("prompt {prompt_id} is not addressable (policy has {num_prompts} prompts)")]
    PromptOutOfRange { prompt_id: usize, num_prompts: usize },

    #[error("token {token} out of range for vocabulary size {vocab}")]
    TokenOutOfRange { token: Token, vocab: usize },

    #[error("sequence of length {len} exceeds horizon {horizon}")]
    SequenceTooLong { len: usize, horizon: usize },

    #[error("prefix continues past the end-of-sequence token")]
    PrefixPastEos,

    #[error("enumeration of {count} sequences exceeds cap {cap}")]
    EnumerationCap { count: u128, cap: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed rollout group: {0}")]
    MalformedGroup(String),

    #[error("buffer accepts version {expected}, got group of version {got}")]
    VersionMismatch { expected: u64, got: u64 },

    #[error("KL support violation: q assigns zero probability to sequence {sequence:?} which has p = {p}")]
    SupportViolation { sequence: Vec<Token>, p: f64 },

    #[error("zero-probability token {token} under the {which} policy (prompt {prompt_id}, position {position})")]
    ZeroProbability {
        which: &'static str,
        prompt_id: usize,
        position: usize,
        token: Token,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("schema mismatch: column `{column}` missing from {path}")]
    SchemaMismatch { column: String, path: PathBuf },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("plot: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
