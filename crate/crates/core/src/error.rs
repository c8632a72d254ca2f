use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by every operation in this crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("sequence length {len} exceeds the maximum of {max}")]
    Length { len: usize, max: usize },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("unknown document id `{0}`")]
    UnknownDocument(String),
    #[error("document cache is stale: built at store version {cached}, store is at {current}")]
    StaleCache { cached: u64, current: u64 },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("undefined result: {0}")]
    Undefined(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
