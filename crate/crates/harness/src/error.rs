use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}, batch {batch:?}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        batch: Vec<String>,
    },
    #[error(transparent)]
    Core(#[from] octaseg_core::Error),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl From<candle_core::Error> for HarnessError {
    fn from(e: candle_core::Error) -> Self {
        Self::Core(e.into())
    }
}

impl From<octaseg_core::error::ConfigError> for HarnessError {
    fn from(e: octaseg_core::error::ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl HarnessError {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Core(octaseg_core::Error::Config(_)) => 2,
            Self::NonFiniteLoss { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
