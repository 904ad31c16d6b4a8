//! Seeded weight initializers.

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Arr;

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Arr {
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros(shape: &[usize]) -> Arr {
    Arr::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    Arr::ones(IxDyn(shape))
}

/// He-style init for a linear layer `[fan_in, fan_out]`.
pub fn he(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Arr {
    normal(rng, &[fan_in, fan_out], (2.0 / fan_in as f64).sqrt())
}
