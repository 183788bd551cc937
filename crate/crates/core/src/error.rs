use alloc::string::String;

/// Errors produced by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("degenerate embedding: vector has zero or non-finite norm")]
    DegenerateEmbedding,
    #[error("embedding contains NaN or infinite values")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("vector is not unit-norm (norm = {0})")]
    NotUnitNorm(f64),
    #[error("duplicate id {0} in embedding store")]
    DuplicateId(u64),
    #[error("embedding store is empty")]
    EmptyStore,
    #[error("query is not unit-norm (norm = {0})")]
    QueryNotNormalized(f64),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("image too small for cropping: {width}x{height} (minimum 4x4)")]
    ImageTooSmall { width: u32, height: u32 },
    #[error("invalid crop ratio {0}: must lie in (0, 1]")]
    InvalidCropRatio(f64),
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidDropout(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("prefix of length {len} exceeds max_len {max_len}")]
    PrefixTooLong { len: usize, max_len: usize },
    #[error("prefix must be non-empty and start with bos")]
    InvalidPrefix,
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty reference set")]
    EmptyReferences,
    #[error("empty hypothesis")]
    EmptyHypothesis,
    #[error("empty reference corpus")]
    EmptyCorpus,
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("embedder failure: {0}")]
    Embedder(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
