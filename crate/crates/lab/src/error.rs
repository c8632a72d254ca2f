use std::io;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] lft_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}:{line}: {message}: `{content}`", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        content: String,
        message: String,
    },
    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
}

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for violated internal invariants, 1 for everything a user can fix.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(lft_core::Error::Contract(_) | lft_core::Error::NonFinite { .. } | lft_core::Error::StaleCache { .. }) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
