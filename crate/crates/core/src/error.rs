use std::fmt;
use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("sequence too short: length {len}, need at least {min}")]
    SequenceTooShort { len: usize, min: usize },
    #[error("parameter error: {0}")]
    Param(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("vocabulary error: {0}")]
    Vocab(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Distinct failure modes when reading a checkpoint file.
#[derive(Debug)]
pub enum CheckpointError {
    BadMagic(String),
    Version(String),
    Truncated(String),
    Malformed { line: usize, msg: String },
    KindMismatch { expected: String, found: String },
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic(line) => write!(f, "bad magic line {line:?}"),
            CheckpointError::Version(v) => write!(f, "unsupported version {v:?}"),
            CheckpointError::Truncated(what) => write!(f, "truncated file: {what}"),
            CheckpointError::Malformed { line, msg } => write!(f, "line {line}: {msg}"),
            CheckpointError::KindMismatch { expected, found } => {
                write!(f, "head kind mismatch: expected {expected}, found {found}")
            }
            CheckpointError::ShapeMismatch { name, expected, found } => {
                write!(f, "shape mismatch for {name}: expected {expected:?}, found {found:?}")
            }
        }
    }
}

impl std::error::Error for CheckpointError {}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
