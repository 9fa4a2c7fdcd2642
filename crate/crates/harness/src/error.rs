use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] semedit_core::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl HarnessError {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 2,
            HarnessError::Core(semedit_core::Error::Integrity(_)) => 3,
            _ => 1,
        }
    }

    pub fn is_integrity(&self) -> bool {
        matches!(self, HarnessError::Core(semedit_core::Error::Integrity(_)))
    }
}
