use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Data,
    Config,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("ingredient string {0:?} is empty after normalization")]
    UnusableIngredient(String),
    #[error("no token survives the min-count filter")]
    EmptyVocabulary,
    #[error("merge decision references unknown token {0:?}")]
    InvalidDecision(String),
    #[error("none of the recipe's ingredients is in the vocabulary")]
    EmptyEncoding,
    #[error("no recipe survives filtering")]
    EmptyDataset,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("layout overflow: {0}")]
    LayoutOverflow(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("empty ingredient sequence")]
    EmptySequence,
    #[error("ingredient id {id} out of range for a vocabulary of {vocab_size}")]
    InvalidId { id: usize, vocab_size: usize },
    #[error("zero-norm embedding")]
    DegenerateEmbedding,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid features: {0}")]
    InvalidFeatures(String),
    #[error("non-finite {what}; last finite state saved to {checkpoint:?}")]
    Diverged {
        what: String,
        checkpoint: Option<PathBuf>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) => ErrorKind::Config,
            Error::Diverged { .. } | Error::Tensor(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
