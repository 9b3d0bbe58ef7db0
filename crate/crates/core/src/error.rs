use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("corpus too small: {have} articles, need more than {need}")]
    CorpusTooSmall { have: usize, need: usize },

    #[error("k-means needs at least k points: n = {n}, k = {k}")]
    TooFewPoints { n: usize, k: usize },

    #[error("unknown action id {id} (K = {k})")]
    UnknownAction { id: usize, k: usize },

    #[error("regime {0} requires a trained planner")]
    PlannerRequired(String),

    #[error("malformed {format} data: {reason}")]
    Format { format: &'static str, reason: String },

    #[error("missing artifact {path}; run `{producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("config digest mismatch for {path}: expected {expected}, found {found} (pass --force to override)")]
    DigestMismatch { path: PathBuf, expected: String, found: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
