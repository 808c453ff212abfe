//! Similarity-aware, training-free token pruning for transformer inference,
//! with small reference encoder/decoder stacks and an experiment harness.

pub mod block;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod lm;
pub mod prune;
pub mod rng;
pub mod snt1;
pub mod synth;
pub mod tensor;
pub mod vit;
pub mod vlm;

pub use error::{Error, Result};
