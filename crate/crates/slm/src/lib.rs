//! Adapter-sandwich speech-language model at desk scale.
//!
//! A small trainable transformer adapter is sandwiched between a frozen
//! speech-style encoder and a frozen encoder-decoder language model. The
//! adapter subsamples the speech encodings, maps them into the LM's
//! embedding space, and the concatenated `{text instruction}{audio}`
//! sequence is fed through the frozen LM with a next-token loss. Only the
//! adapter trains by default; named trainability masks unlock fine-tuning
//! variants.
//!
//! Everything runs on a single-threaded deterministic tensor core with
//! reverse-mode autodiff; a fixed seed and precision reproduce runs
//! bit-identically.

pub mod backbones;
pub mod biasing;
pub mod cascade;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fuzzing;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod sandwich;
pub mod scalar;
pub mod speechify;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod transformer;
pub mod vocab;

pub use error::{Result, SlmError};
pub use scalar::{Dtype, Scalar};
