use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Sd3Error {
    /// A caller broke an operation's precondition (shapes, indices, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An argument is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    /// Training produced a non-finite loss; carries enough state to debug it.
    #[error("non-finite loss at iteration {iteration}: {diagnostics}")]
    NonFiniteLoss { iteration: u64, diagnostics: String },

    /// A failure inside the training loop, tagged with the environment step.
    #[error("at environment step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<Sd3Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Sd3Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Sd3Error {
    Sd3Error::Contract(msg.into())
}

impl Sd3Error {
    pub fn at_step(step: u64, source: Sd3Error) -> Self {
        Sd3Error::AtStep {
            step,
            source: Box::new(source),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Sd3Error::Io {
            path: path.into(),
            source,
        }
    }
}
