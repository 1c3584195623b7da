#![allow(dead_code)]

use modfuse_core::rng::{seeded, SeededRng};
use modfuse_core::Tensor;
use rand::Rng;

pub const H: f64 = 1e-5;

pub fn random_tensor(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn rng(seed: u64) -> SeededRng {
    seeded(seed)
}

/// Relative error with a small absolute floor so that near-zero gradients
/// are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` at every element of `x`.
pub fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + H;
        let up = f(&probe);
        probe.data_mut()[i] = orig - H;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * H);
    }
    out
}

pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Scalar probe `Σ r·y` used to turn a tensor-valued map into a loss.
pub fn project(y: &Tensor, r: &Tensor) -> f64 {
    y.dot(r)
}

/// Whether the forward and backward one-sided slopes agree to 1e-3, i.e.
/// the function has no kink within one step of the probe point.
pub fn smooth_within_h(up: f64, mid: f64, down: f64) -> bool {
    let fwd = (up - mid) / H;
    let bwd = (mid - down) / H;
    rel_err(fwd, bwd) < 1e-3
}
