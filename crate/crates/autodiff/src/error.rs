use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{op} expects a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("log of non-positive value {value} at index {index}")]
    NonPositiveLog { index: usize, value: f64 },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("range {start}..{end} out of bounds for dimension of size {size}")]
    OutOfBounds { start: usize, end: usize, size: usize },

    #[error("concatenation of an empty list")]
    EmptyConcat,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
