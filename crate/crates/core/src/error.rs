use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto process exit codes:
/// `Config` -> 2, `Data` -> 3, everything else that aborts a run -> 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("verification failed: {0}")]
    Verify(String),
    /// Replay source has nothing to sample yet. The training engine maps
    /// this onto the "memory is not empty" guard instead of failing.
    #[error("replay memory is empty")]
    EmptyMemory,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
