use std::path::PathBuf;

use thiserror::Error;

use crate::types::RankingViolation;

/// Errors raised anywhere in the evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid ranking: {0}")]
    InvalidRanking(#[from] RankingViolation),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid prefix: {0}")]
    InvalidPrefix(String),

    #[error("invalid configuration at `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error(
        "enumeration of {needed} rankings exceeds the cap of {cap} and Monte Carlo fallback is disabled"
    )]
    EnumerationCap { needed: usize, cap: usize },

    #[error("context has no id; {0} requires contexts drawn from a finite table")]
    MissingContextId(&'static str),

    #[error("unknown context id {0}")]
    UnknownContext(u32),

    #[error("click model diverged at epoch {epoch} (loss = {loss}); config: {config}")]
    Divergence {
        epoch: usize,
        loss: f64,
        config: String,
    },

    #[error("reward model cannot be fit: {0}")]
    NoClickedRecords(String),

    #[error("condition violated: {0}")]
    ConditionViolation(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("failed to parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("seed {seed} failed: {source}")]
    Seed {
        seed: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
