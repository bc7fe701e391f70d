use std::path::{Path, PathBuf};

/// Failures of the file formats, harness and command-line tool.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{}: truncated, expected {expected} bytes but found {found}", path.display())]
    Truncated { path: PathBuf, expected: u64, found: u64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: u64, loss: f64 },
    #[error("{}: {source}", path.display())]
    Data { path: PathBuf, source: attgate_core::Error },
    #[error(transparent)]
    Core(attgate_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<attgate_core::Error> for Error {
    fn from(e: attgate_core::Error) -> Self {
        match e {
            attgate_core::Error::InvalidConfig(m) => Error::Config(m),
            other => Error::Core(other),
        }
    }
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), msg: msg.into() }
    }

    /// Process exit status: 2 config, 3 I/O or data, 4 numeric abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFinite { .. } => 4,
            Error::Core(attgate_core::Error::InvalidArgument(_)) | Error::Core(attgate_core::Error::IndexOutOfRange { .. }) => 2,
            _ => 3,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
