//! Dense layer and global average pooling, used by the pooled proxy heads.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// `y = W·x + b` with `W: [out, in]`, `x: [in]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    if x.shape() != [i] {
        return Err(Error::shape("linear input", &[i], x.shape()));
    }
    if b.shape() != [o] {
        return Err(Error::shape("linear bias", &[o], b.shape()));
    }
    let y = (0..o)
        .map(|r| {
            let row = &w.data()[r * i..(r + 1) * i];
            row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>() + b.data()[r]
        })
        .collect();
    Tensor::new(&[o], y)
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    if grad_out.shape() != [o] {
        return Err(Error::shape("linear grad_out", &[o], grad_out.shape()));
    }
    let g = grad_out.data();
    let mut gx = vec![0.0; i];
    let mut gw = vec![0.0; o * i];
    for r in 0..o {
        let row = &w.data()[r * i..(r + 1) * i];
        for c in 0..i {
            gx[c] += row[c] * g[r];
            gw[r * i + c] = g[r] * x.data()[c];
        }
    }
    Ok((Tensor::new(&[i], gx)?, Tensor::new(&[o, i], gw)?, grad_out.clone()))
}

/// Mean over the spatial axes of `[C, D, H, W]`, giving `[C]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let c = x.channels();
    let n = x.spatial_len() as f64;
    Tensor::from_fn(&[c], |ch| x.channel(ch).iter().sum::<f64>() / n)
}

pub fn global_avg_pool_backward(shape: &[usize], grad_out: &Tensor) -> Tensor {
    let c = shape[0];
    let n: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(c * n);
    for ch in 0..c {
        data.extend(std::iter::repeat_n(grad_out.data()[ch] / n as f64, n));
    }
    Tensor::new(shape, data).expect("pool shape")
}
