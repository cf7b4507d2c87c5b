use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("nothing to pool")]
    NothingToPool,

    #[error("no location data")]
    NoLocationData,

    #[error("no context data")]
    NoContextData,

    #[error("no client updates to aggregate")]
    NoUpdates,

    #[error("cannot sample {requested} clients out of {available}")]
    TooFewClients { requested: usize, available: usize },

    #[error("undefined AUROC: labels contain a single class")]
    UndefinedAuroc,

    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },

    #[error("PHQ-9 score {0} outside 0..=27")]
    Phq9OutOfRange(i64),

    #[error("leave-one-user-out needs at least 2 users, got {0}")]
    TooFewUsers(usize),

    #[error("embedding dimension mismatch at sample `{sample_id}`: expected {expected}, got {actual}")]
    EmbeddingDim {
        sample_id: String,
        expected: usize,
        actual: usize,
    },

    #[error("missing embedding for sample `{0}`")]
    MissingEmbedding(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl std::fmt::Display, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_string(),
            line,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
