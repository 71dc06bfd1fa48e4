use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("non-finite gradient for parameter tensor {0}")]
    NonFiniteGradient(usize),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Failures while decoding one of the binary file formats.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("not a {0} file")]
    BadMagic(&'static str),

    #[error("unsupported {what} version {found} (this build reads version {expected})")]
    Version { what: &'static str, found: u16, expected: u16 },

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("truncated payload")]
    Truncated,

    #[error("trailing bytes after payload")]
    TrailingBytes,

    #[error("checksum mismatch in parameter block")]
    Checksum,

    #[error("kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: &'static str, found: &'static str },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
}
