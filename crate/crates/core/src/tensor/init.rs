//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::Tensor;

/// Entries drawn from U(-1/sqrt(d_in), 1/sqrt(d_in)) for a `d_in x d_out` weight.
pub fn fan_in_uniform<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (d_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..d_in * d_out).map(|_| dist.sample(rng)).collect();
    Tensor::from_raw(vec![d_in, d_out], data)
}

pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..shape.iter().product()).map(|_| dist.sample(rng)).collect();
    Tensor::from_raw(shape.to_vec(), data)
}
