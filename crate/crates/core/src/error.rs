use std::io;

use thiserror::Error;

/// Errors raised by the numeric core, the file formats and the pipelines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has (near) zero L2 norm")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dangling id `{0}`")]
    DanglingId(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("query {query}: {candidates} candidates but {logits} teacher logits")]
    CandidateCountMismatch {
        query: usize,
        candidates: usize,
        logits: usize,
    },
    #[error("invalid prefix dimensions {dims:?} for full dimension {full}")]
    BadDims { dims: Vec<usize>, full: usize },
    #[error("index dimension {dim} is not in 1..={full}")]
    BadDim { dim: usize, full: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("parameter manifests differ: {0}")]
    ManifestMismatch(String),
    #[error("embedder failed for instance `{0}`")]
    EmbedderFailure(String),
    #[error("cannot place {clusters} cluster centers in {dim} dimensions with max cosine {max_cosine}")]
    InfeasibleSeparation {
        clusters: usize,
        dim: usize,
        max_cosine: f64,
    },
    #[error("instance `{0}` has no parts")]
    EmptyInstance(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bad embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
