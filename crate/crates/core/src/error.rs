use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left:?} vs {right:?} ({context})")]
    Dimension {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite function value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },

    #[error("training loss became non-finite in epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("token index {index} at position {position} is outside vocabulary of size {size}")]
    Vocabulary {
        position: usize,
        index: usize,
        size: usize,
    },

    #[error("sequence of length {len} is shorter than the receptive field {needed}")]
    SequenceTooShort { len: usize, needed: usize },

    #[error("question has {len} tokens, maximum is {max}")]
    QuestionTooLong { len: usize, max: usize },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate id `{0}`")]
    Duplicate(String),

    #[error("unknown image id `{0}`")]
    UnknownImage(String),

    #[error("word `{0}` is not in the taxonomy")]
    OutOfTaxonomy(String),

    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            context,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
