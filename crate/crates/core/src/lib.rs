//! Desk-scale laboratory for SLAM-ASR encoder pruning and LoRA compensation:
//! a prunable transformer speech encoder over synthetic feature frames, a
//! trainable projector, a frozen character-level LM with optional LoRA
//! adapters, the full training/evaluation recipe, analytic parameter
//! accounting, and the three-level error-analysis pipeline.

pub mod checkpoint;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod eval;
pub mod lm;
pub mod params;
pub mod projector;
pub mod synth;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use error::{EvalError, ModelError, TensorError};
pub use tensor::Tensor;

/// Stable seed mixing (splitmix64); used everywhere a sub-seed is derived so
/// that adding grid cells never perturbs existing ones.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Hash a string into a seed salt (FNV-1a, stable across platforms).
pub fn salt_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
