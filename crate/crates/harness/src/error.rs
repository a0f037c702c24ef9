use std::io;

use thiserror::Error;

use ids_core::CoreError;

/// Harness-level failures, split so the CLI can map them to exit codes:
/// config errors exit 2, numerical failures exit 3, everything else 1.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Core(CoreError),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Core(CoreError::Numerical(_)) => 3,
            HarnessError::Core(_) => 3,
            HarnessError::Io(_) => 1,
            HarnessError::Format(_) => 1,
        }
    }
}

impl From<CoreError> for HarnessError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidSpec(msg) => HarnessError::Config(msg),
            other => HarnessError::Core(other),
        }
    }
}
