#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svae::nn::{ArchConfig, ImageShape};
use svae::vae::{HeadKind, ModelConfig};
use svae::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform values with magnitude at least `margin`.
pub fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// `sum(w ⊙ y)` with a fixed random `w`, so no gradient is trivially zero.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> svae::Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let w = uniform(tape.shape(y), 0.5, 1.5, &mut r);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

pub fn small_arch(base_dim: usize) -> ArchConfig {
    ArchConfig { base_dim, dense_block_width: 16, ..ArchConfig::default() }
}

pub fn model_config(h: usize, c: usize, latent_dim: usize, head: HeadKind, base_dim: usize) -> ModelConfig {
    ModelConfig { image: ImageShape::new(h, h, c), latent_dim, head, arch: small_arch(base_dim) }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
