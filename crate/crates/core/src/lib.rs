//! Vision-language assistant for power-line inspection imagery.
//!
//! The crate is organised around the life cycle of the model:
//!
//! - [`model`]: vision encoder, projector, causal decoder, tokenizer,
//!   checkpoints and generation.
//! - [`sequence`]: conversation samples and their role-marked token
//!   streams with response-only loss masks.
//! - [`trainer`]: the two-stage freeze/tune loop with AdamW and a cosine
//!   schedule, plus dataset mixing.
//! - [`pipeline`]: instruction-data synthesis from captions, detections and
//!   seed templates through a pluggable chat backend.
//! - [`eval`]: multiple-choice evaluation.
//! - [`synth`]: a small synthetic inspection world used for demos and tests.
//! - [`config`]: flat `key = value` run configuration.
//! - [`jsonl`]: line-delimited JSON reading and writing.

pub mod config;
pub mod error;
pub mod eval;
pub mod jsonl;
pub mod model;
pub mod pipeline;
pub mod sequence;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
