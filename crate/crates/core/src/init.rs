//! Seeded weight initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

/// He (Kaiming) normal initialization: `N(0, 2 / fan_in)`.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng))
}

/// `N(0, 1 / fan_in)`, for layers not followed by a rectifier.
pub fn lecun_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (1.0 / fan_in.max(1) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng))
}

/// Inverse of `θ = π · sigmoid(raw)`.
pub fn theta_to_raw(theta: f64) -> f64 {
    let p = theta / std::f64::consts::PI;
    (p / (1.0 - p)).ln()
}

pub fn raw_to_theta(raw: f64) -> f64 {
    std::f64::consts::PI * crate::tensor::sigmoid(raw)
}
