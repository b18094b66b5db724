use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("data format error: {0}")]
    Format(#[from] FormatError),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

/// Failures while decoding descriptor-map files, manifests, checkpoints and
/// config files. Each variant carries a stable numeric code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("file truncated: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("non-finite payload value at level {level}, element {index}")]
    NonFinitePayload { level: usize, index: usize },

    #[error("invalid header: {0}")]
    InvalidHeader(String),

    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),

    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
}

impl FormatError {
    pub fn code(&self) -> u32 {
        match self {
            FormatError::BadMagic { .. } => 1,
            FormatError::UnsupportedVersion(_) => 2,
            FormatError::Truncated { .. } => 3,
            FormatError::NonFinitePayload { .. } => 4,
            FormatError::InvalidHeader(_) => 5,
            FormatError::TrailingBytes(_) => 6,
            FormatError::Manifest { .. } => 7,
            FormatError::Config { .. } => 8,
        }
    }
}
