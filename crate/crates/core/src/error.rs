use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numerical domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("unknown label `{label}` at {path}:{line}")]
    UnknownLabel {
        label: String,
        path: String,
        line: usize,
    },

    #[error("label set mismatch: {0}")]
    LabelMismatch(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("empty sentence")]
    EmptySentence,

    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command-line tool.
    ///
    /// 1 = usage/config, 2 = data, 3 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Dimension { .. } => 1,
            Error::Parse { .. }
            | Error::UnknownLabel { .. }
            | Error::LabelMismatch(_)
            | Error::EmptyCorpus(_)
            | Error::EmptySentence
            | Error::Format { .. }
            | Error::CorruptCheckpoint(_)
            | Error::Io { .. } => 2,
            Error::Domain { .. } | Error::NonFinite(_) => 3,
        }
    }
}
