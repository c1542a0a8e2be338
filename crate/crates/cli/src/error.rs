use std::path::PathBuf;

use thiserror::Error;

/// Failure of a CLI command; each kind maps to a distinct exit status.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),

    /// A required artifact of an earlier stage is absent or incompatible.
    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {detail}")]
    Io { path: PathBuf, detail: String },
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 2,
            Self::Dependency(_) => 3,
            Self::Numeric(_) => 4,
            Self::Io { .. } => 5,
        }
    }

    pub fn io(path: impl Into<PathBuf>, e: impl std::fmt::Display) -> Self {
        Self::Io { path: path.into(), detail: e.to_string() }
    }
}

impl From<layersep::Error> for CliError {
    fn from(e: layersep::Error) -> Self {
        use layersep::Error as E;
        match e {
            E::Dimension(_) | E::Domain(_) | E::Config(_) => Self::Validation(e.to_string()),
            E::Training { .. } => Self::Numeric(e.to_string()),
            E::Format { ref path, .. } => Self::Io { path: path.clone(), detail: e.to_string() },
            E::Io { path, source } => Self::Io { path, detail: source.to_string() },
        }
    }
}
