// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

/// Errors raised by the BEVT1 tensor reader/writer.
///
/// Every variant carries a stable numeric code (see [`TensorFileError::code`]).
#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected BEVT1")]
    MagicMismatch,
    #[error("file truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("dims describe {expected} values but {found} were given")]
    DimMismatch { expected: usize, found: usize },
    #[error("tensor must have at least one dimension")]
    EmptyDims,
    #[error("dimension {0} does not fit in u32")]
    DimOverflow(usize),
}

impl TensorFileError {
    pub fn code(&self) -> u32 {
        match self {
            TensorFileError::Io(_) => 1,
            TensorFileError::MagicMismatch => 2,
            TensorFileError::Truncated { .. } => 3,
            TensorFileError::DimMismatch { .. } => 4,
            TensorFileError::EmptyDims => 5,
            TensorFileError::DimOverflow(_) => 6,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid feature map: {0}")]
    InvalidMap(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("degenerate polygon: {0}")]
    DegeneratePolygon(String),
    #[error("non-finite sampling position ({row}, {col})")]
    NonFiniteSample { row: f64, col: f64 },
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("query set is missing {0}")]
    Missing(&'static str),
    #[error("{gts} ground truths cannot be assigned to {queries} queries")]
    TooManyGroundTruths { queries: usize, gts: usize },
    #[error("brute-force oracle limited to 8 ground truths, got {0}")]
    OracleTooLarge(usize),
    #[error("parameter tensor `{0}` not found")]
    MissingParam(String),
    #[error(transparent)]
    Tensor(#[from] TensorFileError),
}

impl Error {
    pub(crate) fn shape(what: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::ShapeMismatch {
            what: what.into(),
            expected,
            found,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
