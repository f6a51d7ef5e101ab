//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("embedding id {id} out of range [0, {vocab}) at position {position}")]
    IdOutOfRange {
        id: u32,
        vocab: usize,
        position: usize,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("empty sequence passed to {op}")]
    EmptySequence { op: &'static str },

    #[error("sequence contains no maskable tokens (all positions are special)")]
    NoMaskableTokens,

    #[error("{op} needs at least {min} tokens, got {len}")]
    SequenceTooShort {
        op: &'static str,
        len: usize,
        min: usize,
    },

    #[error("no complete sentences: sequence has no sentence delimiters")]
    NoSentenceBoundaries,

    #[error("negative loss weight {value} for {name}")]
    NegativeLossWeight { name: &'static str, value: f64 },

    #[error("non-finite gradient in tensor '{tensor}'")]
    NonFiniteGradient { tensor: String },

    #[error("min length {min} exceeds max length {max}")]
    BadLengthBounds { min: usize, max: usize },

    #[error("empty corpus at {path}")]
    EmptyCorpus { path: String },

    #[error("line {line}: {message}")]
    Jsonl { line: usize, message: String },

    #[error("checkpoint: unknown version {version} (expected {expected})")]
    CheckpointVersion { version: u32, expected: u32 },

    #[error("checkpoint: tensor '{name}' fails CRC check")]
    CheckpointCrc { name: String },

    #[error("checkpoint: tensor '{name}' has shape {found:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checkpoint: truncated payload (need {need} bytes, have {have})")]
    CheckpointTruncated { need: usize, have: usize },

    #[error("checkpoint: missing tensor '{name}'")]
    CheckpointMissing { name: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
