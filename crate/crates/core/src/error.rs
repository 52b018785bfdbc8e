use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at {record}: {message}")]
    Parse {
        path: PathBuf,
        record: String,
        message: String,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("duplicate sample_id {0}")]
    DuplicateId(u64),

    #[error("unknown sample_id {0}")]
    UnknownId(u64),

    #[error("embedding file: {0}")]
    EmbeddingFormat(String),

    #[error("unexpected end of embedding file")]
    TruncatedEmbeddingFile,

    #[error("embedding ids not present in dataset: {0:?}")]
    OrphanEmbeddings(Vec<u64>),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("zero-norm embedding")]
    ZeroNorm,

    #[error("missing {modality} embedding for sample {sample_id}")]
    MissingEmbedding { modality: String, sample_id: u64 },

    #[error("missing tag annotations for sample {sample_id} in categories {categories:?}")]
    MissingTags {
        sample_id: u64,
        categories: Vec<String>,
    },

    #[error("query has {tags} tags but {clusters} clusters were requested; use STI or RS instead")]
    TooFewTags { tags: usize, clusters: usize },

    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),

    #[error("requested {requested} demonstrations but only {available} are available")]
    NotEnoughSamples { requested: usize, available: usize },

    #[error("no alternative answer in label space for {0:?}")]
    NoAlternativeAnswer(String),

    #[error("unsupported question pattern: {0:?}")]
    UnsupportedPattern(String),

    #[error("probe: {0}")]
    Probe(String),

    #[error("template: {0}")]
    Template(String),

    #[error("image: {0}")]
    Image(String),

    #[error("oracle error for query {query_id}: {kind}")]
    Oracle { query_id: u64, kind: OracleFailure },

    #[error("SQPA round 1 (demos {round1_ids:?}) failed: {source}")]
    Sqpa {
        round1_ids: Vec<u64>,
        #[source]
        source: Box<Error>,
    },

    #[error("embedding service: {0}")]
    EmbeddingService(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("config: {0}")]
    Config(String),

    #[error("resume: {0}")]
    Resume(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleFailure {
    #[error("timeout")]
    Timeout,
    #[error("http status {0}")]
    Http(u16),
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("{0}")]
    Model(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        path: impl Into<PathBuf>,
        record: impl Into<String>,
        message: impl ToString,
    ) -> Self {
        Error::Parse {
            path: path.into(),
            record: record.into(),
            message: message.to_string(),
        }
    }
}
