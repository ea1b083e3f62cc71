use std::path::PathBuf;

/// Failure of a command, carrying its process exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unreadable or inconsistent input: config, data, checkpoint.
    #[error("{0}")]
    Input(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("epoch {epoch}, batch {batch}: {source}")]
    Numerical {
        epoch: usize,
        batch: usize,
        #[source]
        source: selfspike::Error,
    },

    #[error("{path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] selfspike::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::NonFiniteLoss { .. } | CliError::Numerical { .. } => 3,
            CliError::Core(
                selfspike::Error::NonFiniteGradient { .. } | selfspike::Error::NonFiniteLoss(_),
            ) => 3,
            _ => 2,
        }
    }

    pub(crate) fn write(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Write {
            path: path.into(),
            source,
        }
    }
}
