//! Vision-language report generation for endoscopy screenshots: a patch
//! transformer encoder, multi-image fusion, an autoregressive decoder, the
//! two-stage training loop, greedy decoding with attention grounding, text
//! metrics and a synthetic corpus generator.

pub mod autograd;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod generation;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod storage;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
