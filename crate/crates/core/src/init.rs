use rand::Rng;

use crate::numerics::{Real, Shape, Tensor};

/// Uniform weights in [-sqrt(6 / fan_in), sqrt(6 / fan_in)], where fan_in is
/// every axis but the first.
pub fn kaiming_uniform<T: Real>(rng: &mut impl Rng, shape: Shape) -> Tensor<T> {
    let fan_in = (shape.c * shape.h * shape.w) as f64;
    let bound = (6.0 / fan_in).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
}
