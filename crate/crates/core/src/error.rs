use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("line {line}: {message}")]
    InvalidRecord { line: usize, message: String },

    #[error("invalid box {0:?}: corners must be finite with positive width and height")]
    InvalidBox([f64; 4]),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("empty token sequence")]
    EmptyQuery,

    #[error("could not satisfy query template after {0} attempts")]
    Unsatisfiable(usize),

    #[error("non-finite loss term `{term}` at iteration {iteration}")]
    NonFiniteLoss { term: &'static str, iteration: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("query {query} in scene {scene} has no ground-truth index")]
    MissingGroundTruth { scene: usize, query: usize },

    #[error("unknown ablation toggle `{0}`")]
    InvalidToggle(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors caused by bad input or configuration rather than by
    /// the environment or a failed run.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. } | Error::NonFiniteLoss { .. })
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
