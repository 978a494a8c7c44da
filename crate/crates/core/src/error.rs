use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("tensor shape {shape:?} does not match data length {len}")]
    BadShape { shape: Vec<usize>, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("unbound input `{0}`")]
    UnboundInput(String),

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("forward pass has not been run")]
    NotEvaluated,

    #[error("no gradient supplied for parameter `{0}`")]
    MissingGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero matrix has no spectral norm")]
    ZeroMatrix,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("split `{0}` is empty")]
    EmptySplit(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("reference signal is zero; NMSE is undefined")]
    UndefinedReference,

    #[error("bad magic bytes {0:?}, expected \"CSD1\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("file truncated: need {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },

    #[error("declared dimensions overflow: {0}")]
    DimensionOverflow(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status for the command-line tool. Usage errors exit
    /// with 2 before any of these are reached.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::InvalidConfig(_) => 4,
            Error::BadMagic(_)
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. }
            | Error::DimensionOverflow(_)
            | Error::Checkpoint(_) => 5,
            Error::Diverged { .. } => 6,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
