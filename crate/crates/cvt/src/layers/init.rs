//! Weight initialization: truncated normal (std 0.02, resampled beyond 2σ)
//! for weights, zeros/ones for biases and norm affines.

use rand::rngs::StdRng;
use rand_distr::{Distribution, Normal};

use crate::float::Float;

pub(crate) const INIT_STD: f64 = 0.02;

pub(crate) fn trunc_normal<T: Float>(rng: &mut StdRng, n: usize, std: f64) -> Vec<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break T::from_f64(v);
            }
        })
        .collect()
}
