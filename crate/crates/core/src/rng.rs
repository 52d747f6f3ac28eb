//! Named, reproducible random streams.
//!
//! Every consumer of randomness (data, init, shuffle, augment, ...) derives
//! its own generator from the run seed, a stream name and an index, so
//! adding draws to one stream never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

pub type StreamRng = ChaCha8Rng;

pub fn stream(seed: u64, name: &str, index: u64) -> StreamRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Normal samples with standard deviation `std`, redrawn outside `±2·std`.
pub fn trunc_normal(rng: &mut StreamRng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("std is positive");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

/// He-style normal init for ReLU convolutions: `std = sqrt(2 / fan_in)`.
pub fn kaiming_normal(rng: &mut StreamRng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("fan_in is positive");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}
