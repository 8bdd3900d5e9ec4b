//! Multimodal depression screening at desk scale.
//!
//! The crate wires together heterogeneous-source input unification, a
//! NetVLAD audio encoder, a multi-cue video encoder, availability-aware
//! audio-video fusion with a shared projection, and a small decoder-only
//! language model fine-tuned with low-rank adapters. Everything runs in
//! 64-bit floats with hand-derived gradients so every trainable path can
//! be verified against central differences.

pub mod audio;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod lm;
pub mod pipeline;
pub mod tensor;
pub mod text;
pub mod video;

pub use error::{Error, Result};
