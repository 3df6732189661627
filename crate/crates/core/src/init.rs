use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// Zero-mean normal weights with standard deviation `sqrt(gain / fan_in)`.
pub fn scaled_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> Tensor {
    let std = (gain / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    let count = shape.iter().product();
    let data = (0..count).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape and count agree")
}
