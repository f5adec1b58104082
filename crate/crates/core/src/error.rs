use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch, expected {expected}, got {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("malformed CSR matrix: {0}")]
    MalformedCsr(String),

    #[error("row {row} has no stored entries")]
    EmptyRow { row: usize },

    #[error("non-finite gradient for {tensor} at step {step}")]
    NonFiniteGradient { tensor: &'static str, step: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported weight file version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("weight file truncated: {0}")]
    Truncated(String),

    #[error("tensor {name}: manifest shape {declared:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        declared: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable short code, used by the CLI and the Python bindings.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NonFinite(_) => "non_finite",
            Error::MalformedCsr(_) => "malformed_csr",
            Error::EmptyRow { .. } => "empty_row",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::BadMagic { .. } => "bad_magic",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Truncated(_) => "truncated",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::MissingTensor(_) => "missing_tensor",
            Error::Manifest(_) => "manifest",
            Error::Image(_) => "image",
            Error::Io(_) => "io",
        }
    }

    /// True for errors that come from reading or decoding external files.
    pub fn is_format_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::VersionMismatch { .. }
                | Error::Truncated(_)
                | Error::ShapeMismatch { .. }
                | Error::MissingTensor(_)
                | Error::Manifest(_)
                | Error::Image(_)
                | Error::Io(_)
        )
    }
}

pub(crate) fn dim_mismatch(
    op: &'static str,
    expected: impl Into<String>,
    found: impl Into<String>,
) -> Error {
    Error::DimensionMismatch {
        op,
        expected: expected.into(),
        found: found.into(),
    }
}
