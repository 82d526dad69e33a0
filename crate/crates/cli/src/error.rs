use std::path::Path;

use thiserror::Error;

/// Command failures, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] stylebridge::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 usage, 3 runtime abort, 4 I/O.
    pub fn exit_code(&self) -> u8 {
        use stylebridge::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                E::Diverged { .. } | E::NonFinite(_) => 3,
                E::Io(_) | E::Format(_) => 4,
                E::InvalidArgument(_) | E::ShapeMismatch { .. } => 2,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
