use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("unrecognised IDX magic number 0x{0:08x}")]
    BadMagic(u32),

    #[error("truncated IDX data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("invalid model spec: {0}")]
    Spec(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("dataset not found: {0}")]
    MissingDataset(String),

    #[error("malformed results file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
