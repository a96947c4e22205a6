use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the engine.
///
/// Variants are grouped into three families (configuration, data and
/// numerics) which the command-line front end maps onto exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("no sequences in {0}")]
    NoSequences(PathBuf),

    #[error("dataset fully filtered")]
    FullyFiltered,

    #[error("item {item} out of range (item count {count})")]
    ItemOutOfRange { item: String, count: usize },

    #[error("sequence of user {user} has length {len}, need at least {min}")]
    SequenceTooShort {
        user: String,
        len: usize,
        min: usize,
    },

    #[error("bad magic in {what}: expected {expected:?}, found {found:?}")]
    BadMagic {
        what: &'static str,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported {what} version {version}")]
    BadVersion { what: &'static str, version: u32 },

    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("encoding dim {dim} is not divisible by codebook count {splits}")]
    DimNotDivisible { dim: usize, splits: usize },

    #[error("only {distinct} distinct sub-vectors in codebook {codebook}, fewer than {centroids} centroids; use a smaller centroid count")]
    TooFewDistinct {
        codebook: usize,
        distinct: usize,
        centroids: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("missing checkpoint tensor `{0}`")]
    MissingTensor(String),
}

/// Coarse classification of an [`Error`], used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::UnknownKey(_) => ErrorKind::Config,
            Error::Shape(_) | Error::NonFinite(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
