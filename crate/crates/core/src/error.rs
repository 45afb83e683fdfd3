use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown world `{0}`")]
    UnknownWorld(String),
    #[error("invalid world: {0}")]
    InvalidWorld(String),
    #[error("illegal action {action} at state {state}")]
    IllegalAction { state: usize, action: String },
    #[error("trajectory already terminated")]
    Terminated,
    #[error("trajectory is incomplete")]
    Incomplete,
    #[error("empty legal action set")]
    EmptyLegalSet,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value at node {node}: {what}")]
    NonFinite { node: usize, what: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("enumeration exceeded cap of {0} traces")]
    CapExceeded(usize),
    #[error("conditioning event has zero probability")]
    ZeroProbability,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error's category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::UnknownWorld(_) => 2,
            Error::Parse { .. } | Error::InvalidWorld(_) | Error::Checkpoint(_) => 3,
            Error::NonFinite { .. } => 4,
            Error::Io { .. } => 5,
            _ => 1,
        }
    }
}
