use std::io;

use thiserror::Error;

/// Errors produced anywhere in the quantization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {lhs:?} vs {rhs:?} ({context})")]
    Shape {
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        context: &'static str,
    },

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DType {
        expected: &'static str,
        found: &'static str,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("empty tensor")]
    Empty,

    #[error("bad container magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("unknown dtype `{0}`")]
    UnknownDType(String),

    #[error("malformed container header: {0}")]
    Header(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("unknown tap point `{0}`")]
    UnknownTap(String),

    #[error("missing recipe entry for layer `{0}`")]
    MissingLayer(String),

    #[error("recipe version mismatch: file has {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("code {code} outside [{lo}, {hi}]")]
    CodeRange { code: i32, lo: i32, hi: i32 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("token length {found} does not match calibrated length {expected}")]
    TokenLength { found: usize, expected: usize },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::DType { .. } => "dtype",
            Error::Invalid(_) => "invalid",
            Error::Precondition(_) => "precondition",
            Error::Empty => "empty",
            Error::BadMagic(_) => "bad_magic",
            Error::Truncated(_) => "truncated",
            Error::DuplicateName(_) => "duplicate_name",
            Error::UnknownDType(_) => "unknown_dtype",
            Error::Header(_) => "header",
            Error::MissingTensor(_) => "missing_tensor",
            Error::UnknownTap(_) => "unknown_tap",
            Error::MissingLayer(_) => "missing_layer",
            Error::Version { .. } => "version",
            Error::CodeRange { .. } => "code_range",
            Error::NonFinite(_) => "non_finite",
            Error::TokenLength { .. } => "token_length",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn shape(lhs: &[usize], rhs: &[usize], context: &'static str) -> Self {
        Error::Shape {
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
            context,
        }
    }
}
