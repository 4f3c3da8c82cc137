use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("{what} index {index} out of range (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot([usize; 2]),

    #[error("latent split needs an even width, got {0}")]
    OddWidth(usize),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown model variant `{0}`")]
    UnknownVariant(String),

    #[error("variant `{variant}` does not provide {what}")]
    Contract { variant: &'static str, what: &'static str },

    #[error("user {user} has {available} unvisited items, {requested} negatives requested")]
    InsufficientNegatives {
        user: usize,
        available: usize,
        requested: usize,
    },

    #[error("empty history for user {0}")]
    EmptyHistory(usize),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("expected header `{expected}`, found `{found}`")]
    VersionMismatch { expected: String, found: String },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
