//! Point-wise activations and the per-voxel channel softmax.

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const DEFAULT_NEGATIVE_SLOPE: f64 = 0.01;

pub fn leaky_relu_forward(x: &Tensor, negative_slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { negative_slope * v })
}

/// The derivative at exactly zero is taken to be `negative_slope`.
pub fn leaky_relu_backward(x: &Tensor, grad_out: &Tensor, negative_slope: f64) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::shape("leaky relu grad_out", x.shape(), grad_out.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { negative_slope * g })
        .collect();
    Tensor::new(x.shape(), data)
}

/// Softmax over axis 0 of a `[C, ...]` tensor, independently per voxel.
pub fn softmax_channels_forward(x: &Tensor) -> Tensor {
    let c = x.shape()[0];
    let n = x.len() / c;
    let src = x.data();
    let mut out = vec![0.0; x.len()];
    for i in 0..n {
        let max = (0..c).map(|k| src[k * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..c {
            let e = (src[k * n + i] - max).exp();
            out[k * n + i] = e;
            sum += e;
        }
        for k in 0..c {
            out[k * n + i] /= sum;
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

/// Vector-Jacobian product of the channel softmax given its output `probs`.
pub fn softmax_channels_backward(probs: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if probs.shape() != grad_out.shape() {
        return Err(Error::shape("softmax grad_out", probs.shape(), grad_out.shape()));
    }
    let c = probs.shape()[0];
    let n = probs.len() / c;
    let (p, g) = (probs.data(), grad_out.data());
    let mut out = vec![0.0; probs.len()];
    for i in 0..n {
        let dot: f64 = (0..c).map(|k| p[k * n + i] * g[k * n + i]).sum();
        for k in 0..c {
            out[k * n + i] = p[k * n + i] * (g[k * n + i] - dot);
        }
    }
    Tensor::new(probs.shape(), out)
}
