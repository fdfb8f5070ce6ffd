use std::path::PathBuf;

use crate::gateway::GatewayError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate passage id `{0}`")]
    DuplicatePassageId(String),

    #[error("corpus invariant violated: {0}")]
    InvalidCorpus(String),

    #[error("dangling image references (strict mode): {}", .0.join(", "))]
    DanglingImageRefs(Vec<String>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("preQ `{0}` has no embedding")]
    MissingEmbedding(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("unknown preQ id `{0}`")]
    UnknownPreq(String),

    #[error("corrupt vector file {path}: {message}")]
    CorruptIndex { path: PathBuf, message: String },

    #[error("{artifact} not found; run {command}")]
    MissingArtifact {
        artifact: &'static str,
        command: &'static str,
    },

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("gold passage `{passage_id}` of query `{query_id}` is not in the corpus")]
    UnknownGoldPassage { query_id: String, passage_id: String },

    #[error("every {stage} request failed; first error: {first}")]
    ProviderFailure { stage: &'static str, first: String },

    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
