use diffcore::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("config line {line}: {message}")]
    ConfigLine { line: usize, message: String },
    #[error("unsupported environment `{env}` for {what}")]
    Unsupported { env: &'static str, what: &'static str },
    #[error("diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 1 for numerical divergence, 2 for I/O and
    /// configuration problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 1,
            Error::Diff(DiffError::NonFinite { .. } | DiffError::NonFiniteGradient(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
