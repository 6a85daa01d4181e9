use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("degenerate schedule: alpha_bar {alpha_bar:e} at timestep {timestep} is below the division floor")]
    Degenerate { timestep: usize, alpha_bar: f64 },
    #[error("timestep ordering: {0}")]
    Ordering(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("trace does not match model: {0}")]
    TraceMismatch(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn in_stage(self, stage: usize) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidRange(_) | Error::Ordering(_) | Error::Invariant(_) => ErrorClass::Usage,
            Error::Degenerate { .. } | Error::NonFinite(_) | Error::Divergence { .. } => {
                ErrorClass::Numerical
            }
            Error::Stage { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }
}
