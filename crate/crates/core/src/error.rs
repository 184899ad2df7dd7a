use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
///
/// Variants are grouped by how the command line reports them: usage and
/// configuration problems, validation failures of inputs and contracts, and
/// numeric failures (divergence, non-finite state).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    Shape {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("sampling produced non-finite state at step {step}")]
    Sampling { step: usize },

    #[error("rollout ({group}, {rollout}) failed: {source}")]
    Rollout {
        group: usize,
        rollout: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("reward `{objective}` failed on rollout {rollout}: {reason}")]
    Reward {
        objective: String,
        rollout: usize,
        reason: String,
    },

    #[error("fine-tuning aborted at iteration {iteration}: {source}")]
    Finetune {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed {kind} file: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by non-finite or diverging numerics.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Divergence { .. } | Error::Sampling { .. } => true,
            Error::Rollout { source, .. } | Error::Finetune { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
