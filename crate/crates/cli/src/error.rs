use std::path::PathBuf;

use epidiff_core::sampler::SamplerFailure;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Every problem found in the inputs, one line each.
    #[error("validation failed:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),
    #[error("sampler failure: {0}")]
    Sampler(Box<SamplerFailure>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(vec![msg.into()])
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for bad inputs, 3 when sampling failed, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Sampler(_) => 3,
            _ => 1,
        }
    }
}

impl From<epidiff_core::Error> for CliError {
    fn from(e: epidiff_core::Error) -> Self {
        match e {
            epidiff_core::Error::Instability { .. } | epidiff_core::Error::Sampler(_) => CliError::Other(e.to_string()),
            other => CliError::validation(other.to_string()),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(format!("csv: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
