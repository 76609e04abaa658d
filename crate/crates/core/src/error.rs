use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

/// Every failure the core can report. The std companion wraps this in its own
/// IO-aware error type.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{what} index {index} out of range for size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("softmax row {row} has every entry masked")]
    DegenerateRow { row: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("corpus token {0:?} collides with a reserved special token")]
    Corpus(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("record {index}: {source}")]
    Record { index: usize, source: Box<Error> },
}

impl Error {
    pub fn at_record(self, index: usize) -> Error {
        Error::Record {
            index,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
