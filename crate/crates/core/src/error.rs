use std::path::PathBuf;

use crate::rollout::RolloutGroup;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A token reached an objective without the labels it needs.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// The generation budget ran out before the training quota was filled.
    #[error("generation budget exhausted after {rounds} rounds: kept {kept} of {quota} groups")]
    BudgetExhausted {
        rounds: usize,
        kept: usize,
        quota: usize,
        partial: Box<Vec<RolloutGroup>>,
    },

    /// A gradient contribution was NaN or infinite.
    #[error("non-finite gradient from token {token} at position {position} of response {response}")]
    NonFiniteGradient {
        response: usize,
        position: usize,
        token: usize,
    },

    /// Direction statistics are undefined for this gradient set.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A configuration file or override could not be applied.
    #[error("config: {0}")]
    Config(String),

    /// A line-oriented file could not be parsed.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
