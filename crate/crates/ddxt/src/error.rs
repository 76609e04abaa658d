use std::io;
use std::path::{Path, PathBuf};

use ddxt_core::Error as CoreError;

/// Failures of the file and command layer, each tied to an exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}, row {row}: {msg}")]
    Row { path: PathBuf, row: usize, msg: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// 1 for usage and configuration, 2 for data, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Io { .. } | Error::Format { .. } | Error::Row { .. } | Error::Data(_) => 2,
            Error::Core(e) => core_exit_code(e),
        }
    }
}

fn core_exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Param(_) => 1,
        CoreError::Validation(_) | CoreError::Corpus(_) | CoreError::Index { .. } => 2,
        CoreError::Record { source, .. } => core_exit_code(source),
        _ => 3,
    }
}
