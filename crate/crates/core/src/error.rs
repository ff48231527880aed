use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty batch: the classification loss needs at least one ROI")]
    EmptyBatch,

    #[error("infeasible proxy split: {0}")]
    InfeasibleSplit(String),

    #[error("insufficient support pool: {0}")]
    InsufficientPool(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("pretraining did not converge: {0}")]
    NotConverged(String),

    #[error("episode {episode}: all {trials} trials failed; first failure: {first}")]
    EpisodeFailed {
        episode: usize,
        trials: usize,
        first: String,
    },

    #[error("every class in the subset is empty")]
    AllClassesEmpty,

    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn parse(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
