use std::path::PathBuf;

/// Errors raised by the library.
///
/// File-format problems get one variant each so callers can tell a wrong
/// file type from a damaged one.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {op}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical overflow in {0}")]
    Overflow(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient buffer")]
    MissingGrad(String),

    #[error("invalid config: {0}")]
    Config(String),

    /// Model and data disagree (class count, input length).
    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Overflow(_) | Error::NonFinite(_) | Error::Diverged(_)
        )
    }

    /// True for file-format and I/O errors.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::UnsupportedVersion(_)
                | Error::Truncated(_)
                | Error::Malformed(_)
                | Error::File { .. }
                | Error::Io(_)
                | Error::EmptyDataset
                | Error::Incompatible(_)
                | Error::LabelOutOfRange { .. }
        )
    }
}
