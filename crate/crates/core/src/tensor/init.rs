use rand::Rng;

use super::{Real, Tensor};

/// He-uniform initialization: `U(−√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::cast(rng.random_range(-limit..limit)))
}

pub fn zeros_like_shape<T: Real>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape)
}
