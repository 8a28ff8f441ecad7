use alloc::string::String;
use core::fmt;

use crate::tensor::Shape5;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands disagree on shape.
    ShapeMismatch {
        op: &'static str,
        left: Shape5,
        right: Shape5,
    },
    /// A single operand has a shape the operation cannot accept.
    InvalidShape { op: &'static str, reason: String },
    /// A spatial extent is not divisible as required (pooling, pyramid depth).
    NotDivisible {
        op: &'static str,
        dims: [usize; 3],
        divisor: usize,
    },
    InvalidArgument { what: &'static str, reason: String },
    /// Data length does not match the product of a shape.
    LengthMismatch { expected: usize, actual: usize },
    MissingParameter(String),
    DuplicateParameter(String),
    MissingGradient(String),
    NonScalarRoot(Shape5),
    NonFinite { context: String },
    LabelAbsent { label: u16 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left} and {right}")
            }
            Error::InvalidShape { op, reason } => write!(f, "{op}: {reason}"),
            Error::NotDivisible { op, dims, divisor } => write!(
                f,
                "{op}: spatial dims {}x{}x{} are not divisible by {divisor}; pad the input to a multiple of {divisor}",
                dims[0], dims[1], dims[2]
            ),
            Error::InvalidArgument { what, reason } => write!(f, "invalid {what}: {reason}"),
            Error::LengthMismatch { expected, actual } => {
                write!(f, "data length {actual} does not match shape volume {expected}")
            }
            Error::MissingParameter(p) => write!(f, "parameter `{p}` not found"),
            Error::DuplicateParameter(p) => write!(f, "parameter `{p}` registered twice"),
            Error::MissingGradient(p) => write!(f, "parameter `{p}` has no gradient"),
            Error::NonScalarRoot(s) => write!(f, "backward root must be a scalar, got {s}"),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::LabelAbsent { label } => write!(f, "label {label} is absent from a volume"),
        }
    }
}

impl core::error::Error for Error {}
