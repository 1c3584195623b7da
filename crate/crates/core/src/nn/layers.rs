//! Parameterised layers. Each holds slot indices into a [`ParamStore`] and
//! exposes a pure forward pass plus a backward pass that adds parameter
//! gradients into caller-supplied buffers.

use super::activation::{leaky_relu_backward, leaky_relu_forward, DEFAULT_NEGATIVE_SLOPE};
use super::conv::{conv3d_backward, conv3d_forward, conv_transpose3d_backward, conv_transpose3d_forward};
use super::init::{he_init, he_init_with_fan_in};
use super::linear::{linear_backward, linear_forward};
use super::norm::{instance_norm_backward, instance_norm_forward, NormCache};
use super::param::ParamStore;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Cubic kernel `k`, He-initialised weights, zero bias. Padding keeps
    /// extents for stride 1 (`(k-1)/2`).
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, id: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut SeededRng) -> Self {
        let w = store.add(format!("{id}.w"), he_init(&[cout, cin, k, k, k], rng));
        let b = store.add(format!("{id}.b"), Tensor::zeros(&[cout]));
        Conv {
            w,
            b,
            stride,
            pad: (k - 1) / 2,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        conv3d_forward(x, store.value(self.w), store.value(self.b), self.stride, self.pad)
    }

    pub fn backward(&self, store: &ParamStore, x: &Tensor, grad_out: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let g = conv3d_backward(x, store.value(self.w), grad_out, self.stride, self.pad)?;
        grads[self.w].add_assign(&g.w);
        grads[self.b].add_assign(&g.b);
        Ok(g.x)
    }
}

/// Stride-2 kernel-2 upsampling convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTranspose {
    pub w: usize,
    pub b: usize,
}

impl ConvTranspose {
    pub fn new(store: &mut ParamStore, id: &str, cin: usize, cout: usize, rng: &mut SeededRng) -> Self {
        let w = store.add(format!("{id}.w"), he_init_with_fan_in(&[cin, cout, 2, 2, 2], cin, rng));
        let b = store.add(format!("{id}.b"), Tensor::zeros(&[cout]));
        ConvTranspose { w, b }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        conv_transpose3d_forward(x, store.value(self.w), store.value(self.b))
    }

    pub fn backward(&self, store: &ParamStore, x: &Tensor, grad_out: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let g = conv_transpose3d_backward(x, store.value(self.w), grad_out)?;
        grads[self.w].add_assign(&g.w);
        grads[self.b].add_assign(&g.b);
        Ok(g.x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstanceNorm {
    pub gain: usize,
    pub shift: usize,
}

impl InstanceNorm {
    pub fn new(store: &mut ParamStore, id: &str, channels: usize) -> Self {
        InstanceNorm {
            gain: store.add(format!("{id}.g"), Tensor::full(&[channels], 1.0)),
            shift: store.add(format!("{id}.s"), Tensor::zeros(&[channels])),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, id: &str, inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        Linear {
            w: store.add(format!("{id}.w"), he_init_with_fan_in(&[outputs, inputs], inputs, rng)),
            b: store.add(format!("{id}.b"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        linear_forward(x, store.value(self.w), store.value(self.b))
    }

    pub fn backward(&self, store: &ParamStore, x: &Tensor, grad_out: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let (gx, gw, gb) = linear_backward(x, store.value(self.w), grad_out)?;
        grads[self.w].add_assign(&gw);
        grads[self.b].add_assign(&gb);
        Ok(gx)
    }
}

/// conv3d(3³) → instance norm → leaky ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub conv: Conv,
    pub norm: InstanceNorm,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    input: Tensor,
    norm: NormCache,
    pre_act: Tensor,
}

impl ConvBlock {
    pub fn new(store: &mut ParamStore, id: &str, cin: usize, cout: usize, stride: usize, rng: &mut SeededRng) -> Self {
        ConvBlock {
            conv: Conv::new(store, &format!("{id}.conv"), cin, cout, 3, stride, rng),
            norm: InstanceNorm::new(store, &format!("{id}.norm"), cout),
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let c = self.conv.forward(store, x)?;
        let (n, norm) = instance_norm_forward(&c, store.value(self.norm.gain), store.value(self.norm.shift))?;
        let out = leaky_relu_forward(&n, DEFAULT_NEGATIVE_SLOPE);
        Ok((
            out,
            BlockCache {
                input: x.clone(),
                norm,
                pre_act: n,
            },
        ))
    }

    pub fn backward(&self, store: &ParamStore, cache: &BlockCache, grad_out: &Tensor, grads: &mut [Tensor]) -> Result<Tensor> {
        let g = leaky_relu_backward(&cache.pre_act, grad_out, DEFAULT_NEGATIVE_SLOPE)?;
        let (g, dgain, dshift) = instance_norm_backward(&cache.norm, store.value(self.norm.gain), &g)?;
        grads[self.norm.gain].add_assign(&dgain);
        grads[self.norm.shift].add_assign(&dshift);
        self.conv.backward(store, &cache.input, &g, grads)
    }
}
