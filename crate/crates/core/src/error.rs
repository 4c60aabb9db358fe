use std::path::PathBuf;

use diffcore::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("geometry error at z={z:?}: {reason}")]
    Geometry { z: Vec<f64>, reason: String },

    #[error("obfuscation error: {0}")]
    Obfuscation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn geometry(z: &[f64], reason: impl Into<String>) -> Self {
        Error::Geometry {
            z: z.to_vec(),
            reason: reason.into(),
        }
    }

    /// Process exit status for the command-line front end.
    ///
    /// 2 = configuration, 3 = data or missing input, 4 = anything raised while
    /// training or evaluating.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Format { .. } | Error::Io { .. } | Error::MissingArtifact(_) | Error::Data(_) => 3,
            _ => 4,
        }
    }

    /// Short machine-readable class name used on the diagnostic stream.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Diff(_) => "dimension",
            Error::Contract(_) => "contract",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::MissingArtifact(_) => "missing-artifact",
            Error::Data(_) => "data",
            Error::Config(_) => "config",
            Error::Training(_) => "training",
            Error::Geometry { .. } => "geometry",
            Error::Obfuscation(_) => "obfuscation",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
