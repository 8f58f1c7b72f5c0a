use thiserror::Error;

/// Errors produced by the co-learning pipeline.
///
/// Class indices carried by errors are 1-based, matching how classes are
/// reported everywhere outside the training internals.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("class {class}: pool has {available} examples but {requested} were requested")]
    InsufficientPool {
        class: usize,
        requested: usize,
        available: usize,
    },

    #[error("class {class} has no examples but the sampler requires it")]
    EmptyClass { class: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NumericalFailure { step: u64, detail: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("malformed {what} at line {line}: {reason}")]
    Format {
        what: &'static str,
        line: usize,
        reason: String,
    },
}

impl Error {
    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    /// Re-tags a numerical failure with the training step it occurred at.
    pub fn at_step(self, step: u64) -> Self {
        match self {
            Error::NumericalFailure { detail, .. } => Error::NumericalFailure { step, detail },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
