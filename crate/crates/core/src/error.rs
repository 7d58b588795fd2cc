use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("non-finite {term} at iteration {iteration}")]
    NonFinite { iteration: usize, term: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("truncated file while reading {0}")]
    Truncated(String),

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 2,
            Error::ShapeMismatch { .. } | Error::Alignment(_) => 3,
            Error::Magic { .. } | Error::Version(_) | Error::Truncated(_) | Error::Format(_) => 4,
            Error::Io(_) => 5,
            Error::Dimension { .. }
            | Error::Config(_)
            | Error::Usage(_)
            | Error::Invariant(_) => 1,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
