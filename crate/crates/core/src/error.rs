use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate vector: norm {norm:e} is below {epsilon:e}")]
    DegenerateVector { norm: f64, epsilon: f64 },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("numeric failure at node `{node}`")]
    NumericFailure { node: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad file format: {0}")]
    Format(String),
    #[error("duplicate item key ({domain}, {token})")]
    DuplicateKey { domain: String, token: String },
    #[error("index out of range: {0}")]
    Range(String),
    #[error("missing embedding for item ({domain}, {token})")]
    MissingEmbedding { domain: String, token: String },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint incompatible with configuration: {0}")]
    Incompatible(String),
    #[error("model has not been pre-trained; pass the from-scratch switch to fine-tune a random initialization")]
    NotPretrained,
    #[error("empty data: {0}")]
    EmptyData(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
