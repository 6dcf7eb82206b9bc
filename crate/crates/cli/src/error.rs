use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("{}: byte {offset}: {message}", path.display())]
    Format { path: PathBuf, offset: usize, message: String },

    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("{}: {source}", path.display())]
    Network { path: PathBuf, source: sconv_core::Error },

    #[error(transparent)]
    Core(#[from] sconv_core::Error),

    #[error("verification failed: {0}")]
    Verify(String),
}
