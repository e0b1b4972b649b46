use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic bytes")]
    BadMagic,

    #[error("unsupported format version {0}")]
    BadVersion(u16),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Non-finite value surfaced during training or evaluation; the string
    /// names the offending component.
    #[error("numeric failure in {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code contract: 2 for configuration problems, 3 for
    /// numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) => 2,
            Error::Numeric(_) => 3,
            _ => 1,
        }
    }
}
