use std::io;
use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] revmux_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("{}:{line}: {msg}", path.display())]
    Line { path: PathBuf, line: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backbone reached {accuracy:.4} eval accuracy, below the floor {floor}")]
    Nonconvergence { accuracy: f64, floor: f64 },
}

impl Error {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// 2 configuration, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use revmux_core::Error as C;
        match self {
            Error::Config(_) => 2,
            Error::Core(C::Config(_) | C::Shape { .. } | C::Index { .. }) => 2,
            Error::Core(C::NonFinite { .. }) | Error::Nonconvergence { .. } => 4,
            Error::Core(C::Data(_)) | Error::Io { .. } | Error::Format { .. } | Error::Line { .. } => 3,
        }
    }
}
