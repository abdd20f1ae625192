use std::io;
use std::path::{Path, PathBuf};

use jointseg_core::Error as CoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    /// A file exists but its contents cannot be decoded.
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    /// A config or spec file that parses but is rejected, or does not parse.
    #[error("{}: {detail}", path.display())]
    Config { path: PathBuf, detail: String },
    /// Inconsistent arguments or inputs.
    #[error("{0}")]
    Invalid(String),
    #[error("training aborted ({source}); diagnostic checkpoint written to {}", checkpoint.display())]
    Aborted { source: CoreError, checkpoint: PathBuf },
    #[error("gradient check failed for: {0}")]
    GradcheckFailed(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    pub fn format(path: impl AsRef<Path>, detail: impl Into<String>) -> Error {
        Error::Format { path: path.as_ref().to_path_buf(), detail: detail.into() }
    }

    pub fn config(path: impl AsRef<Path>, detail: impl Into<String>) -> Error {
        Error::Config { path: path.as_ref().to_path_buf(), detail: detail.into() }
    }

    /// 1 for validation errors, 2 for runtime errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(e) => match e {
                CoreError::Config(_)
                | CoreError::Shape { .. }
                | CoreError::InvalidLabel { .. }
                | CoreError::StageOrder { .. } => 1,
                _ => 2,
            },
            Error::Config { .. } | Error::Invalid(_) | Error::GradcheckFailed(_) => 1,
            Error::Io { .. } | Error::Format { .. } | Error::Aborted { .. } => 2,
        }
    }
}
