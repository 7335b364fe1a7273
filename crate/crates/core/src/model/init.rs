//! Parameter initialization helpers.

use rand::Rng;

use crate::numerics::{Scalar, Tensor};

/// Uniform initialization bound.
#[derive(Clone, Copy, Debug)]
pub struct Init(pub f64);

impl Init {
    /// `U(-1/√fan_in, 1/√fan_in)`.
    pub fn fan_in(fan_in: usize) -> Self {
        Self(1.0 / libm::sqrt(fan_in.max(1) as f64))
    }
}

pub fn uniform_tensor<T: Scalar>(shape: &[usize], init: Init, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-init.0..init.0)))
        .collect();
    Tensor::new(shape, data).expect("shape")
}
