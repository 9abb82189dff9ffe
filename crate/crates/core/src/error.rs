use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DstError>;

#[derive(Debug, Error)]
pub enum DstError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },
    #[error("ontology error: {0}")]
    Ontology(String),
    #[error("corpus error in dialogue {dialogue} turn {turn}: {message}")]
    Corpus {
        dialogue: String,
        turn: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("context of {needed} tokens exceeds max_len {max_len} even without history")]
    ContextTooLong { needed: usize, max_len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("undefined cosine similarity for zero vector at batch position {0}")]
    ZeroVector(usize),
    #[error("non-finite loss at epoch {epoch} step {step}: {value}")]
    Divergence { epoch: usize, step: usize, value: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl DstError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DstError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, err: impl std::fmt::Display) -> Self {
        DstError::Parse {
            what: what.into(),
            message: err.to_string(),
        }
    }
}
