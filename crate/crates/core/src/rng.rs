//! Seeded randomness. Every stochastic choice in the toolkit draws from a
//! SplitMix64 stream seeded from configuration.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::SplitMix64;

use crate::tensor::Tensor;

pub type Rng = SplitMix64;

pub fn seeded(seed: u64) -> Rng {
    SplitMix64::seed_from_u64(seed)
}

/// Derives an independent stream for a named sub-task so that adding draws in
/// one place never shifts another.
pub fn derive(seed: u64, stream: u64) -> Rng {
    // golden-ratio increment, as in SplitMix itself
    seeded(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17))
}

pub fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| gaussian(rng) * std)
}

/// Rounds every value to the nearest `f32`, so the tensor survives 32-bit
/// checkpoint storage bit-exactly.
pub fn to_f32_precision(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}
