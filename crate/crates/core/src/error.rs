use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two arrays that must agree in shape do not.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A scalar argument is outside its admissible range.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration is internally inconsistent or incomplete.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A loss became non-finite during optimization.
    #[error("training diverged at step {step}: {detail}")]
    Training { step: u64, detail: String },

    /// A file on disk is not in the expected format.
    #[error("malformed {kind} file {path}: {detail}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn ensure_same_shape(what: &str, a: (usize, usize, usize), b: (usize, usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!(
            "{what}: {}x{}x{} vs {}x{}x{}",
            a.0, a.1, a.2, b.0, b.1, b.2
        )));
    }
    Ok(())
}
