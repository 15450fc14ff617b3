use std::path::PathBuf;

use dermfoundry_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Library failure; its own class decides the exit code.
    #[error(transparent)]
    Core(#[from] CoreError),

    /// Rejected configuration or input; exit 2.
    #[error("invalid configuration: {0}")]
    Invalid(String),

    /// A run that started but could not finish; exit 3.
    #[error("{0}")]
    Runtime(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Invalid(_) => 2,
            CliError::Core(_) | CliError::Runtime(_) | CliError::Io { .. } => 3,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(format!("JSON output: {e}"))
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        CliError::Runtime(format!("image output: {e}"))
    }
}
