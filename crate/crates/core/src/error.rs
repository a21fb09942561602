use alloc::string::String;

/// Errors raised by the math and simulation kernels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor shapes do not conform for the requested operation.
    Shape { op: &'static str, detail: String },
    /// An argument is outside its documented domain.
    InvalidParam { op: &'static str, detail: String },
    /// An index (e.g. a class label) is out of range.
    Index { op: &'static str, detail: String },
    /// A collection that must be nonempty was empty.
    EmptyInput(&'static str),
    /// A posterior or density map lost all of its mass.
    Degenerate { op: &'static str, detail: String },
    /// Training or a loss evaluation produced a non-finite value.
    NonFinite { op: &'static str, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl core::fmt::Display for Error {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::InvalidParam { op, detail } => write!(f, "{op}: invalid parameter: {detail}"),
            Error::Index { op, detail } => write!(f, "{op}: index out of range: {detail}"),
            Error::EmptyInput(op) => write!(f, "{op}: empty input"),
            Error::Degenerate { op, detail } => write!(f, "{op}: degenerate result: {detail}"),
            Error::NonFinite { op, detail } => write!(f, "{op}: non-finite value: {detail}"),
        }
    }
}

impl core::error::Error for Error {}
