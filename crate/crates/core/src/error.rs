use core::fmt;

use alloc::string::String;

use crate::tensor::Shape;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not fit together.
    Dimension {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    /// More than three axes, or a buffer whose length disagrees with its shape.
    BadShape {
        dims: alloc::vec::Vec<usize>,
        len: usize,
    },
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    Numeric(&'static str),
    /// Every position of a loss was masked out.
    DegenerateLoss,
    Contract(&'static str),
    InvalidSpec(String),
    Range {
        what: &'static str,
        value: usize,
        max: usize,
    },
    SequenceLength {
        len: usize,
        max: usize,
    },
    Divergence {
        step: usize,
        stage: &'static str,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs} and {rhs}")
            }
            Error::BadShape { dims, len } => {
                write!(f, "bad tensor shape {dims:?} for buffer of length {len}")
            }
            Error::Index { what, index, bound } => {
                write!(f, "{what}: index {index} out of bounds (< {bound} required)")
            }
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::DegenerateLoss => write!(f, "degenerate loss: every position is masked"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::InvalidSpec(msg) => write!(f, "invalid specification: {msg}"),
            Error::Range { what, value, max } => {
                write!(f, "{what} = {value} out of range (max {max})")
            }
            Error::SequenceLength { len, max } => {
                write!(f, "sequence length {len} exceeds max_seq_len {max}")
            }
            Error::Divergence { step, stage } => {
                write!(f, "non-finite loss at {stage} step {step}")
            }
        }
    }
}

impl core::error::Error for Error {}
