//! Dual-domain masked image modeling for hyperspectral transformers.
//!
//! A hyperspectral neighborhood is cut into one token per pixel (its full
//! spectrum). Pretraining corrupts the token sequence in two ways: whole
//! tokens are swapped for a learnable mask embedding, and each spectrum is
//! low- or high-pass filtered in the Fourier domain. A transformer encoder
//! with a linear decoder learns to restore the clean spectra; the encoder is
//! then fine-tuned for per-pixel classification.

pub mod cli;
pub mod data;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
