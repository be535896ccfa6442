use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config: {0}")]
    Config(String),

    #[error("{}:{line}: {msg}", path.display())]
    Malformed { path: PathBuf, line: usize, msg: String },

    #[error("theory suite: {0} check(s) failed")]
    TheoryFailed(usize),

    #[error(transparent)]
    Core(#[from] humanline_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    /// 2 for bad configuration or input, 3 for numerical aborts and reward
    /// collapse, 4 for a failing theory suite, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use humanline_core::Error as E;
        match self {
            Self::Config(_) | Self::Malformed { .. } => 2,
            Self::TheoryFailed(_) => 4,
            Self::Core(E::NonFinite { .. } | E::Collapse { .. }) => 3,
            Self::Core(E::InvalidParameter(_) | E::Format(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
