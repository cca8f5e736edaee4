use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Every failure the core library can report.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor storage length does not match its declared shape.
    BadTensor { rows: usize, cols: usize, len: usize },
    /// Operand shapes are incompatible at a tape node.
    ShapeMismatch {
        node: usize,
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    /// A NaN or infinity reached a tape node.
    NonFinite { node: usize },
    /// Backward or a scalar readout was requested from a non-scalar node.
    NotScalar { node: usize, shape: (usize, usize) },
    /// `forward` was given the wrong number of input tensors.
    InputCount { expected: usize, got: usize },
    /// A node id that does not belong to the tape.
    UnknownNode { node: usize },
    /// A configuration or argument violates its documented range.
    InvalidArgument { name: &'static str, reason: String },
    /// A class that needs at least one labelled point has none.
    EmptyClass { class: usize },
    /// An operation that needs a non-empty label or point set got none.
    EmptySet { what: &'static str },
    /// An index or class id outside its valid range.
    OutOfRange {
        what: &'static str,
        value: usize,
        bound: usize,
    },
    /// A broken internal invariant.
    Internal(&'static str),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Self::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadTensor { rows, cols, len } => {
                write!(f, "tensor of shape {rows}x{cols} cannot hold {len} values")
            }
            Self::ShapeMismatch {
                node,
                op,
                left,
                right,
            } => write!(
                f,
                "node {node}: {op} shape mismatch ({}x{} vs {}x{})",
                left.0, left.1, right.0, right.1
            ),
            Self::NonFinite { node } => write!(f, "node {node}: non-finite value"),
            Self::NotScalar { node, shape } => {
                write!(f, "node {node} is {}x{}, expected a scalar", shape.0, shape.1)
            }
            Self::InputCount { expected, got } => {
                write!(f, "expected {expected} input tensors, got {got}")
            }
            Self::UnknownNode { node } => write!(f, "node {node} is not on this tape"),
            Self::InvalidArgument { name, reason } => write!(f, "invalid {name}: {reason}"),
            Self::EmptyClass { class } => write!(f, "class {class} has no labelled points"),
            Self::EmptySet { what } => write!(f, "{what} is empty"),
            Self::OutOfRange { what, value, bound } => {
                write!(f, "{what} {value} out of range (must be < {bound})")
            }
            Self::Internal(msg) => write!(f, "internal error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
