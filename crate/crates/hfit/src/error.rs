use std::path::PathBuf;

/// Errors of the IO layer and the command driver.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] hfit_core::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("sample `{id}`: {message}")]
    Sample { id: String, message: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("no samples in split `{0}`")]
    NoSamples(String),
    #[error("unknown ablation mode `{0}`")]
    UnknownMode(String),
    #[error("bypass probe failed for `{mode}`: {message}")]
    Probe { mode: String, message: String },
    #[error("fixture {path}: {message}")]
    Fixture { path: PathBuf, message: String },
}

impl Error {
    /// Stable short code used in the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Core(hfit_core::Error::InvalidConfig(_)) | Error::Config(_) => "config",
            Error::Core(_) => "model",
            Error::Io { .. } => "io",
            Error::Decode { .. } | Error::Sample { .. } => "data",
            Error::Checkpoint { .. } => "checkpoint",
            Error::NoSamples(_) => "no-samples",
            Error::UnknownMode(_) | Error::Probe { .. } => "ablation",
            Error::Fixture { .. } => "fixture",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
