use std::path::PathBuf;

use thiserror::Error;

use crate::datamodel::Triplet;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("activation cache does not belong to the current parameters (cache v{cache}, params v{params})")]
    StaleCache { cache: u64, params: u64 },

    #[error("non-finite gradient in block {block} at index {index}: {value}")]
    NonFiniteGradient {
        block: String,
        index: usize,
        value: f64,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid data: {0}")]
    Validation(String),

    #[error("word table is missing {} vocabulary token(s): {}", .0.len(), .0.join(", "))]
    MissingTokens(Vec<String>),

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("branch {0} is not active in this model")]
    InactiveBranch(&'static str),

    #[error("degenerate language embedding (zero vector before normalization)")]
    DegenerateEmbedding,

    #[error("dataset has no positive pairs")]
    NoPositives,

    #[error("no eligible source triplets for {0}")]
    EmptyPool(Triplet),

    #[error("no informative sources for {0}: all similarity weights are zero")]
    NoInformativeSources(Triplet),

    #[error("every query was excluded (no ground-truth positives)")]
    AllExcluded,

    #[error("query list is empty")]
    EmptyQueries,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// Short, stable category name used by the command line on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::StaleCache { .. } => "shape",
            Error::NonFiniteGradient { .. } | Error::DegenerateEmbedding => "numeric",
            Error::Parse { .. } => "parse",
            Error::Validation(_)
            | Error::MissingTokens(_)
            | Error::UnknownToken(_)
            | Error::NoPositives => "validation",
            Error::Config(_) | Error::InactiveBranch(_) => "config",
            Error::Io { .. } => "io",
            Error::Checkpoint(_) => "checkpoint",
            Error::EmptyPool(_) | Error::NoInformativeSources(_) => "transfer",
            Error::AllExcluded | Error::EmptyQueries => "eval",
        }
    }

    /// Process exit code for the command line; one per category.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" => 2,
            "io" => 3,
            "parse" => 4,
            "validation" => 5,
            "checkpoint" => 6,
            "numeric" => 7,
            "transfer" => 8,
            "eval" => 9,
            _ => 10,
        }
    }
}
