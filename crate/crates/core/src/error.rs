use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("domain error in {op}: entry {index} = {value} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("degenerate point in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("index {index} out of range 0..{len}")]
    Index { index: usize, len: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
