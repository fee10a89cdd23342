//! Shared fixtures for the criterion benchmarks.

use ibpvae::models::{ModelConfig, ModelKind};
use ibpvae::training::Trainer;
use ibpvae::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Binary images `[rows, dim]` with a fixed seed.
pub fn binary_batch(rows: usize, dim: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * dim)
        .map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(&[rows, dim], data).expect("shape matches data")
}

/// Uniform values in (0, 1).
pub fn uniforms(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| rng.random_range(f64::EPSILON..1.0))
        .collect()
}

/// A fresh trainer whose epoch is a single batch of `rows` rows.
pub fn single_batch_trainer(mut config: ModelConfig, rows: usize) -> Trainer<f32> {
    config.batch_size = rows;
    config.epochs = usize::MAX;
    Trainer::new(config).expect("valid config")
}

pub fn dsprites_config(kind: ModelKind) -> ModelConfig {
    ModelConfig::dsprites(kind)
}

pub fn colored_mnist_config(kind: ModelKind) -> ModelConfig {
    ModelConfig::colored_mnist(kind)
}
