use std::io;

use thiserror::Error;

pub type Result<T, E = PackError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PackError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("state error: {0}")]
    State(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("ownership violation: {0}")]
    OwnershipViolation(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    /// A prior-task snapshot changed after later lifecycle operations.
    #[error("forgetting detected: {0}")]
    Forgetting(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl PackError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        PackError::Dimension(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        PackError::Input(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        PackError::State(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        PackError::Format {
            offset,
            message: msg.into(),
        }
    }

    /// True for errors that signal a broken packing invariant rather than bad input.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(
            self,
            PackError::State(_)
                | PackError::OwnershipViolation(_)
                | PackError::Capacity(_)
                | PackError::Forgetting(_)
        )
    }
}
