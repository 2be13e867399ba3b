use std::path::PathBuf;

use sparsevos_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("unsupported {what} version {found} (this build reads {expected})")]
    UnsupportedVersion { what: &'static str, found: u32, expected: u32 },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    NotFound(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Short class tag printed by the CLI.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Core(e) => e.class(),
            Error::Io { .. } => "io error",
            Error::Format(_) => "format error",
            Error::UnsupportedVersion { .. } => "unsupported-version error",
            Error::Config(_) => "config error",
            Error::NotFound(_) => "not-found error",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
