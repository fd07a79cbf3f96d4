use std::path::{Path, PathBuf};

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] crowdlab_core::Error),
    #[error("invalid config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("no CSV logs under {0}")]
    MissingLogs(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {reason}")]
    Csv { path: PathBuf, reason: String },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn csv(path: impl AsRef<Path>, e: impl ToString) -> Self {
        CliError::Csv {
            path: path.as_ref().to_path_buf(),
            reason: e.to_string(),
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Config { .. } => "E_CONFIG",
            CliError::MissingInput(_) => "E_MISSING_INPUT",
            CliError::MissingLogs(_) => "E_MISSING_LOGS",
            CliError::Io { .. } => "E_IO",
            CliError::Csv { .. } => "E_CSV",
            CliError::Usage(_) => "E_USAGE",
        }
    }

    /// `error[CODE]: message` on one line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {}", self.code(), msg.trim())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_codes_pass_through() {
        let e = CliError::from(crowdlab_core::Error::EmptyDataset);
        assert_eq!(e.code(), "E_EMPTY_DATASET");
        assert!(e.line().starts_with("error[E_EMPTY_DATASET]: "));
    }

    #[test]
    fn line_is_single() {
        let e = CliError::Usage("a\nb".into());
        assert_eq!(e.line(), "error[E_USAGE]: a b");
    }
}
