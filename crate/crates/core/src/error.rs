// SPDX-License-Identifier: MIT OR Apache-2.0

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("mean pooling over zero valid rows")]
    EmptyPool,
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("degenerate series: {0}")]
    DegenerateSeries(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimError { expected: usize, got: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("unknown model id `{0}`")]
    UnknownModel(String),
    #[error("layer {layer} out of range for a model of depth {depth}")]
    LayerOutOfRange { layer: usize, depth: usize },
    #[error("token id {token} outside vocabulary of size {vocab}")]
    InvalidToken { token: u32, vocab: usize },
    #[error("sequence of length {len} exceeds the model context of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("requested {k} components but at most {max} are available")]
    RankError { k: usize, max: usize },
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("no probe weight exceeds tau = {tau} for language `{lang}`")]
    NoActiveDimensions { lang: String, tau: f64 },
    #[error("unknown language `{0}`")]
    UnknownLanguage(String),
    #[error("unsupported pack format version {found} (expected {expected})")]
    UnsupportedVersion { found: i64, expected: i64 },
    #[error("corrupt steering pack: {0}")]
    CorruptPack(String),
    #[error("steering pack does not match the model: {0}")]
    PackModelMismatch(String),

    #[error("empty KNN reference set")]
    EmptyReference,
    #[error("language detector failed: {0}")]
    Detector(String),
    #[error("{skipped} of {total} records were malformed (limit is 10%)")]
    TooManySkipped { skipped: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
