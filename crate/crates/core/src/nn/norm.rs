//! Instance normalisation over the spatial axes of each channel.

use crate::par;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Values saved by the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

fn check(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Result<usize> {
    if x.rank() != 4 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "instance norm input must be [C, D, H, W]".into(),
        });
    }
    let c = x.shape()[0];
    if gain.shape() != [c] {
        return Err(Error::shape("instance norm gain", &[c], gain.shape()));
    }
    if shift.shape() != [c] {
        return Err(Error::shape("instance norm shift", &[c], shift.shape()));
    }
    if x.spatial_len() < 2 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "instance norm needs at least 2 spatial voxels".into(),
        });
    }
    Ok(c)
}

/// `y = gain · (x − μ_c) / sqrt(σ²_c + ε) + shift`, statistics per channel.
pub fn instance_norm_forward(x: &Tensor, gain: &Tensor, shift: &Tensor) -> Result<(Tensor, NormCache)> {
    let c = check(x, gain, shift)?;
    let n = x.spatial_len();
    let per_channel = par::map(c, |ch| {
        let src = x.channel(ch);
        let mean = src.iter().sum::<f64>() / n as f64;
        let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let inv_std = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
        let xhat: Vec<f64> = src.iter().map(|v| (v - mean) * inv_std).collect();
        (xhat, inv_std)
    });
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(c);
    for (ch, (xh, is)) in per_channel.into_iter().enumerate() {
        let (g, s) = (gain.data()[ch], shift.data()[ch]);
        y.extend(xh.iter().map(|v| g * v + s));
        xhat.extend(xh);
        inv_std.push(is);
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        NormCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            inv_std,
        },
    ))
}

/// Returns `(grad_x, grad_gain, grad_shift)`.
pub fn instance_norm_backward(cache: &NormCache, gain: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    if grad_out.shape() != cache.xhat.shape() {
        return Err(Error::shape("instance norm grad_out", cache.xhat.shape(), grad_out.shape()));
    }
    let c = cache.inv_std.len();
    let n = grad_out.spatial_len() as f64;
    let per_channel = par::map(c, |ch| {
        let go = grad_out.channel(ch);
        let xh = cache.xhat.channel(ch);
        let g = gain.data()[ch];
        let dshift: f64 = go.iter().sum();
        let dgain: f64 = go.iter().zip(xh).map(|(a, b)| a * b).sum();
        // dxhat = g·go; dx = inv_std/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
        let sum_dxhat = g * dshift;
        let sum_dxhat_xhat = g * dgain;
        let k = cache.inv_std[ch] / n;
        let dx: Vec<f64> = go
            .iter()
            .zip(xh)
            .map(|(&o, &h)| k * (n * g * o - sum_dxhat - h * sum_dxhat_xhat))
            .collect();
        (dx, dgain, dshift)
    });
    let mut dx = Vec::with_capacity(grad_out.len());
    let mut dg = Vec::with_capacity(c);
    let mut ds = Vec::with_capacity(c);
    for (x, g, s) in per_channel {
        dx.extend(x);
        dg.push(g);
        ds.push(s);
    }
    Ok((
        Tensor::new(grad_out.shape(), dx)?,
        Tensor::new(&[c], dg)?,
        Tensor::new(&[c], ds)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalises_each_channel() {
        let x = Tensor::from_fn(&[2, 3, 3, 3], |i| ((i * 7919) % 101) as f64 * 0.3 - 4.0);
        let (y, _) = instance_norm_forward(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2])).unwrap();
        for c in 0..2 {
            let ch = y.channel(c);
            let mean = ch.iter().sum::<f64>() / 27.0;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 27.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_channel_maps_to_shift() {
        let x = Tensor::full(&[1, 2, 2, 2], 3.5);
        let (y, _) = instance_norm_forward(&x, &Tensor::full(&[1], 2.0), &Tensor::full(&[1], 0.25)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }
}
