//! Fixtures for the kernel benchmarks.

use booster_core::nn::{self, ModelSpec, ParamSet};
use booster_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..shape.iter().product()).map(|_| r.random_range(0.0..1.0)).collect();
    Tensor::from_f64_slice(shape, &v).expect("shape matches data")
}

pub fn labels(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 7) % classes).collect()
}

pub fn model(spec: &ModelSpec, seed: u64) -> ParamSet {
    nn::init(spec, seed).expect("valid spec")
}
