use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate scale: {0}")]
    DegenerateScale(String),

    #[error("parse error in {path}{}: {msg}", location(*.line, *.offset))]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        offset: Option<u64>,
        msg: String,
    },

    #[error("defect injection failed: {0}")]
    Injection(String),

    #[error("checkpoint error at byte {offset}: {msg}")]
    Checkpoint { offset: u64, msg: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn location(line: Option<usize>, offset: Option<u64>) -> String {
    match (line, offset) {
        (Some(l), _) => format!(" (line {l})"),
        (None, Some(o)) => format!(" (byte {o})"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse classification used by the command-line front end for exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Argument(_) | Error::Config(_) => ErrorKind::Config,
            Error::NonFinite(_) | Error::DegenerateScale(_) | Error::UndefinedMetric(_) => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}
