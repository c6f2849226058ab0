//! Error type shared by the core modules.

use alloc::string::String;
use core::fmt;

/// Errors produced by corpus construction, classifier math and EM fitting.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// A vocabulary invariant was violated (duplicates, size, unknown id).
    Vocab(String),
    /// A corpus invariant was violated (length mismatch, id out of range).
    Corpus(String),
    /// Two corpora with different vocabularies were combined.
    VocabMismatch(String),
    /// A stochastic matrix or distribution failed validation.
    Distribution(String),
    /// Tensor shapes do not line up.
    Shape(String),
    /// Training diverged (non-finite loss).
    Diverged(String),
    /// An operation was called on inputs it is not defined for.
    Precondition(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::Vocab(msg) => write!(f, "vocabulary error: {msg}"),
            CoreError::Corpus(msg) => write!(f, "corpus error: {msg}"),
            CoreError::VocabMismatch(msg) => write!(f, "vocabulary mismatch: {msg}"),
            CoreError::Distribution(msg) => write!(f, "invalid distribution: {msg}"),
            CoreError::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            CoreError::Diverged(msg) => write!(f, "training diverged: {msg}"),
            CoreError::Precondition(msg) => write!(f, "precondition violated: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
