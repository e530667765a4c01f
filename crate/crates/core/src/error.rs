use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate attention: every position is masked")]
    DegenerateAttention,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("vocabulary error: id {id} out of range for size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("training diverged at step {step}: {component} is not finite")]
    Divergence { step: usize, component: String },

    #[error("gradient check inapplicable: {0}")]
    CheckInapplicable(String),

    #[error("cold start: user has no click history")]
    ColdStart,

    #[error("backward already run on this tape; record a new forward pass first")]
    BackwardTwice,

    #[error("unknown user {0}")]
    UnknownUser(String),

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

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
