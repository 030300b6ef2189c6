//! Parameter initialization.

use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::TensorData;

/// Zero-mean Gaussian init with the given standard deviation.
pub fn gaussian(rng: &mut ChaCha20Rng, shape: &[usize], std: f64) -> TensorData {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    TensorData::from_shape_vec(IxDyn(shape), vals).unwrap()
}

pub fn zeros(shape: &[usize]) -> TensorData {
    TensorData::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> TensorData {
    TensorData::ones(IxDyn(shape))
}

/// Standard-normal noise vector sampler.
pub fn standard_normal(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
}
