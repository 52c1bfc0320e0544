//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::Real;
use crate::tensor::Tensor;

/// He-normal initialization, `std = sqrt(2 / fan_in)`.
pub fn kaiming_normal<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64(z * std)
    })
}

/// `U(−1/√fan_in, 1/√fan_in)` for a `[out, in]` weight.
pub fn linear_uniform<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (shape[1] as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

pub fn linear_uniform_bias<T: Real>(out: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(&[out], |_| T::from_f64(rng.gen_range(-bound..bound)))
}
