use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::annotations::LineError;
use crate::checkpoint::CheckpointError;
use crate::xemb::XembError;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Annotation {
        path: PathBuf,
        #[source]
        source: LineError,
    },
    #[error("{path}: {source}")]
    Xemb {
        path: PathBuf,
        #[source]
        source: XembError,
    },
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric check failed: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] ragcap_core::Error),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use ragcap_core::Error as C;
        match self {
            Error::Config(_) => exit::CONFIG,
            Error::Numeric(_) => exit::NUMERIC,
            Error::Core(C::Config(_) | C::InvalidCropRatio(_) | C::InvalidDropout(_) | C::InvalidK) => exit::CONFIG,
            Error::Core(C::NonFinite) => exit::NUMERIC,
            Error::Stage { source, .. } => source.exit_code(),
            _ => exit::DATA,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
