use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("candidate id lists are not aligned: {0}")]
    Alignment(String),

    #[error("candidate id {0} missing from the ablated logits")]
    MissingCandidate(u32),

    #[error("no recorded response for request {0}")]
    MissingRecord(String),

    #[error("corrupt store: {0}")]
    CorruptStore(String),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("no redundant candidates survived filtering; relax the thresholds")]
    EmptyCandidateSet,

    #[error("value out of range: {0}")]
    Range(String),

    #[error("analysis of image {image_id} failed at token {token_idx}: {source}")]
    Analysis {
        image_id: String,
        token_idx: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// Innermost error, looking through analysis context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Analysis { source, .. } => source.root(),
            other => other,
        }
    }
}
