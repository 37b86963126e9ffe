use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or lengths disagree.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A value is outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("capacity exceeded: requested {requested} rows but only {available} available")]
    Capacity { requested: usize, available: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid model spec: {}", .0.join("; "))]
    InvalidSpec(Vec<String>),

    #[error("training diverged at epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("bundle load error: {0}")]
    BundleLoad(String),

    #[error("model exploration exhausted: every proposal in the ladder has been tried")]
    ExplorationExhausted,

    #[error("optimization collapse: all {0} candidates produced non-finite gradients")]
    OptimizationCollapse(usize),

    #[error("missing input: {}", .0.join(", "))]
    MissingInput(Vec<String>),

    #[error("input verification failed:\n{}", .0.iter().map(|p| format!("  - {p}")).collect::<Vec<_>>().join("\n"))]
    Verification(Vec<crate::agents::VerificationProblem>),

    #[error("bundle is not trained")]
    NotTrained,

    #[error("LLM transport error after {attempts} attempts: {message}")]
    Transport { attempts: usize, message: String },

    #[error("LLM reply failed schema validation after {attempts} attempts: {reason}")]
    Schema {
        attempts: usize,
        reason: String,
        last_reply: String,
    },

    #[error("LLM is not configured: {0}")]
    LlmConfig(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
