//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DeepBowError {
    /// Vocabulary construction failed (empty corpus, shortfall, bad header).
    #[error("vocabulary build: {0}")]
    VocabBuild(String),

    /// A named component (segmenter, mode, side) is not registered.
    #[error("configuration: {0}")]
    Config(String),

    /// Caller-supplied data violates an operation precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// Persistent artifact is corrupt or has an incompatible layout.
    #[error("integrity: {0}")]
    Integrity(String),

    /// Checkpoint/store/vocab hashes do not agree.
    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    /// A requested id is absent from the store and cannot be encoded.
    #[error("not found: {0}")]
    NotFound(String),

    /// Malformed service request.
    #[error("protocol: {0}")]
    Protocol(String),

    /// Training diverged or produced non-finite values.
    #[error("training: {0}")]
    Training(String),

    /// Metric is undefined for the given label distribution.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Internal invariant violated; indicates a bug.
    #[error("internal: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
