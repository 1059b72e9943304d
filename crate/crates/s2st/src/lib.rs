//! Simultaneous speech-to-speech translation pipeline on a desk-scale
//! transformer stack: streaming encoder, boundary-aware prompt extraction,
//! wait-k decoder LM, CTC speech-unit generator, and the training/evaluation
//! harness that ties them together.
//!
//! Everything numeric runs on [`tinytensor`] in `f64`; the [`Tensor`] alias
//! below is the only tensor type this crate uses.

pub mod cif;
pub mod config;
pub mod data;
pub mod decoder_lm;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod metrics;
pub mod ngram;
pub mod scheduler;
pub mod speech_generator;
pub mod train;
pub mod vocoder;

/// The pipeline's tensor type: all model math runs in `f64`.
pub type Tensor = tinytensor::Tensor64;

pub use error::{PipelineError, Result};
pub use model::{Model, ModelConfig, EOS, SEP, TASK, TEXT_BASE};
