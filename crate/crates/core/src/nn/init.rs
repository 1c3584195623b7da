use rand_distr::{Distribution, Normal};

use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// He/Kaiming normal initialisation `N(0, 2/fan_in)` for a convolution weight
/// of shape `[C_out, C_in, kd, kh, kw]` (fan_in = C_in·kd·kh·kw).
pub fn he_init(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    he_init_with_fan_in(shape, fan_in, rng)
}

pub fn he_init_with_fan_in(shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}
