use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure reported by an external port (summarizer, embedder, judge, generator).
#[derive(Debug, Clone, Error, PartialEq)]
pub enum PortError {
    /// Network or endpoint failure; the caller may retry.
    #[error("transport failure: {0}")]
    Transport(String),
    /// The endpoint answered, but the payload violates the port contract.
    #[error("invalid response: {0}")]
    InvalidResponse(String),
}

impl PortError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, PortError::Transport(_))
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("line {line}: malformed JSON: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}: missing required field \"{field}\"")]
    MissingField { line: usize, field: &'static str },

    #[error("line {line}: review text is empty")]
    EmptyReview { line: usize },

    #[error("line {line}: duplicate (user, item) pair ({user_id}, {item_id})")]
    DuplicatePair {
        line: usize,
        user_id: String,
        item_id: String,
    },

    #[error("duplicate review id {0}")]
    DuplicateReviewId(u64),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("unknown user \"{0}\"")]
    UnknownUser(String),

    #[error("unknown item \"{0}\"")]
    UnknownItem(String),

    #[error("node {kind} #{index} has zero degree")]
    ZeroDegree { kind: &'static str, index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero probability for target token at pair {pair}, position {position}")]
    ZeroProbability { pair: usize, position: usize },

    #[error("token id {token} out of vocabulary of size {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },

    #[error("loss became non-finite at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("summarizer returned an empty summary")]
    EmptySummary,

    #[error("input of {needed} characters exceeds the summarizer budget of {budget}")]
    BudgetOverflow { needed: usize, budget: usize },

    #[error("{port} failed after {attempts} attempt(s): {source}")]
    Port {
        port: &'static str,
        attempts: u32,
        #[source]
        source: PortError,
    },

    #[error("embedding width changed from {expected} to {found}")]
    WidthDrift { expected: usize, found: usize },

    #[error("batch of {0} is too small for in-batch negatives (need at least 2)")]
    BatchTooSmall(usize),

    #[error("score {0} outside [0, 100]")]
    ScoreOutOfRange(f64),

    #[error("template: {0}")]
    Template(String),

    #[error("bad {format} file: {message}")]
    Format {
        format: &'static str,
        message: String,
    },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("generator produced an empty explanation")]
    EmptyGeneration,

    #[error("duplicate opinion id \"{0}\"")]
    DuplicateOpinionId(String),

    #[error("{0} is empty")]
    EmptyInput(&'static str),

    #[error("query vector is all zeros")]
    ZeroQuery,

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
