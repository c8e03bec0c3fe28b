use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: region ({row}, {col}) outside {rows}x{cols} grid")]
    OutOfBounds {
        path: PathBuf,
        line: usize,
        row: i64,
        col: i64,
        rows: usize,
        cols: usize,
    },

    #[error("{path}:{line}: duplicate record for user {user}, day {day}, slot {slot}")]
    Duplicate {
        path: PathBuf,
        line: usize,
        user: u64,
        day: u32,
        slot: u8,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {key}: {msg}")]
    Config { key: String, msg: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Dimension { op, lhs, rhs }
    }
}
