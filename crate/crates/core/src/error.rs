use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("no caption can be built from the available title/description")]
    CaptionUnavailable,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("text is empty after normalization")]
    DegenerateText,

    #[error("non-finite gradient in batch {batch:?}")]
    NonFiniteGradient { batch: Vec<usize> },

    #[error("index is empty")]
    EmptyIndex,

    #[error("query {0:?} has no relevance judgements")]
    MissingRelevance(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Shape {
            context,
            expected,
            actual,
        }
    }
}
