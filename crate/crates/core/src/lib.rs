//! Desk-scale encoder-decoder summarization stack.
//!
//! The crate implements the full training and inference pipeline:
//!
//! - [`tensor`]: dense tensors with reverse-mode autodiff on a tape,
//!   including a stop-gradient primitive.
//! - [`attention`]: disentangled attention (content + relative-position
//!   terms) used by the encoder and generator stacks.
//! - [`fie`]: fusion-in-encoder — chunk-local layers followed by global
//!   fusion layers for long inputs.
//! - [`model`]: the seq2seq transformer, MLM generator and RTD
//!   discriminator with gradient-disentangled embedding sharing.
//! - [`objectives`]: corruption planning (masking, span corruption) and
//!   the MLM / RTD / CSP / grounded losses.
//! - [`data`]: tokenizer, vocabulary, JSONL corpus loading and
//!   instruction-grounded formatting.
//! - [`decode`]: greedy and beam-search generation with length penalty
//!   and repeated n-gram blocking.
//! - [`rouge`]: ROUGE-1/2/L F-measure scoring.
//! - [`optim`] / [`trainer`]: AdamW, warmup-linear-decay schedule,
//!   gradient clipping, the phase-1/phase-2/fine-tune training loops.
//! - [`checkpoint`]: binary checkpoint save/load with CRC validation.
//! - [`verify`]: full-model finite-difference gradient checks.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod error;
pub mod fie;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod rouge;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{CoreError, Result};
