//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Operation invoked outside its contract (bad axis, non-scalar root, ...).
    #[error("usage error in {op}: {detail}")]
    Usage { op: &'static str, detail: String },

    /// A probability input carried a negative or otherwise out-of-domain entry.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// Batch with zero rows where at least one is required.
    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    /// Degenerate numeric input, e.g. a zero pooled-feature norm.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Sample id not present in the dataset or memory bank.
    #[error("index error: unknown sample id {id} (valid range 0..{len})")]
    UnknownSample { id: usize, len: usize },

    /// Provenance or gather index outside the tensor it addresses.
    #[error("index error in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    /// Checkpoint file could not be read back.
    #[error("checkpoint load error ({path}): {detail}")]
    Checkpoint { path: String, detail: String },

    /// Dataset directory could not be read back.
    #[error("dataset load error ({path}): {detail}")]
    Dataset { path: String, detail: String },

    /// Bad key, value, or file in a run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Training diverged or hit an inconsistent state.
    #[error("training error: {0}")]
    Training(String),

    /// Evaluation could not produce per-class accuracies.
    #[error("evaluation error: class {class} has no samples")]
    EmptyClass { class: usize },

    /// Malformed run log encountered by the report machinery.
    #[error("report error in {file} line {line}: {detail}")]
    Report {
        file: String,
        line: usize,
        detail: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn usage(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Usage {
            op,
            detail: detail.into(),
        }
    }

    pub fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }
}
