//! Desk-scale prompt-tuned dual-encoder domain adaptation.
//!
//! A frozen toy dual encoder with learnable multi-modal prompts (base
//! branch), per-domain feature banks with an image-guided feature-tuning
//! attention module (alignment branch), four contrastive losses trained
//! end-to-end over a hand-rolled reverse-mode tape, plus a domain
//! discrepancy metrics suite and synthetic domain-shift benchmarks.
//!
//! The `parallel` feature (on by default) enables rayon-backed kernels;
//! without it every loop falls back to the bit-identical sequential path.

pub mod alignment;
pub mod config;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod hash;
pub mod io;
pub mod kernels;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
