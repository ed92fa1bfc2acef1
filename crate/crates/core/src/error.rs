use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad error families; the CLI maps each to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorFamily {
    Usage,
    Io,
    Format,
    Validation,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("invalid quantization parameters: {0}")]
    InvalidQParams(String),

    #[error("missing quantization parameters: {0}")]
    MissingQParams(String),

    #[error("requantization multiplier {multiplier} outside (0, 1) at {context}")]
    MultiplierOutOfRange { multiplier: f64, context: String },

    #[error("dtype mismatch: {0}")]
    DType(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid attribute: {0}")]
    InvalidAttr(String),

    #[error("graph error at node {node}: {message}")]
    Node { node: u32, message: String },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("bad magic {found:?}, expected \"EDRM\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u16),

    #[error("model file truncated while reading {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed model file: {0}")]
    Malformed(String),

    #[error("model is already quantized")]
    AlreadyQuantized,

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("device profile error: {0}")]
    Profile(String),

    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn node(node: u32, message: impl Into<String>) -> Self {
        Error::Node {
            node,
            message: message.into(),
        }
    }

    pub fn family(&self) -> ErrorFamily {
        match self {
            Error::Io { .. } => ErrorFamily::Io,
            Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::Truncated(_)
            | Error::Checksum { .. }
            | Error::Malformed(_)
            | Error::Profile(_) => ErrorFamily::Format,
            Error::Usage(_) => ErrorFamily::Usage,
            _ => ErrorFamily::Validation,
        }
    }
}
