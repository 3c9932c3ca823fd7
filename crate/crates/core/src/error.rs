use thiserror::Error;

/// Errors raised by kernel entry points.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    Argument { op: &'static str, detail: String },

    #[error("neighborhood (kernel {kernel}, dilation {dilation}) is invalid for axis length {len}: {detail}")]
    Geometry {
        len: usize,
        kernel: usize,
        dilation: usize,
        detail: String,
    },

    #[error("non-finite value at flat index {index} entering {op}")]
    NonFinite { op: &'static str, index: usize },

    #[error("saved state does not match: {0}")]
    State(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn arg(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Argument {
            op,
            detail: detail.into(),
        }
    }
}
