use thiserror::Error;

/// Command failure, split by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, config, spec or incompatible inputs. Exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while training or evaluating. Exit code 2.
    #[error(transparent)]
    Runtime(#[from] cycda::Error),
    /// Failure writing or reading run files. Exit code 2.
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) | CliError::Io { .. } => 2,
        }
    }

    pub(crate) fn io(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
