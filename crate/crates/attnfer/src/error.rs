use std::path::{Path, PathBuf};

use attnfer_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const DATA: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const NUMERIC: i32 = 3;
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), message: message.into() }
    }

    /// Data problems exit 1, configuration and checkpoint problems exit 2,
    /// numeric failures exit 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(e) => match e {
                CoreError::Data(_) => exit::DATA,
                CoreError::NumericAbort { .. } | CoreError::NonFinite(_) => exit::NUMERIC,
                CoreError::Shape(_)
                | CoreError::Param(_)
                | CoreError::State(_)
                | CoreError::Config(_)
                | CoreError::Checkpoint(_) => exit::CONFIG,
            },
            Error::Io { .. } | Error::Image { .. } | Error::Format { .. } => exit::DATA,
            Error::Usage(_) => exit::CONFIG,
        }
    }
}
