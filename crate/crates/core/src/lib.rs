//! Few-shot image generation toolkit.
//!
//! A matching generator fuses the multi-level encoder features of K
//! conditional images with similarity-score weights derived from a noise
//! vector, and a matching discriminator scores realism, classifies seen
//! categories, and matches discriminative features. The crate also ships the
//! episodic data pipeline, the alternating training engine, and the
//! evaluation suite (inception score, Fréchet distance, low-data and
//! few-shot classification protocols, ablation grids).

pub mod data;
pub mod discriminator;
pub mod error;
pub mod eval;
pub mod generator;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
