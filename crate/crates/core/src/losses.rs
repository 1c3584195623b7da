//! Segmentation objectives and the three self-supervised proxy losses.
//!
//! Every loss returns `(value, gradient)` with the gradient taken with
//! respect to its first argument. Tensors laid out as `[J, ...]` treat axis
//! 0 as the label axis and everything after it as voxels.

use crate::nn::{softmax_channels_backward, softmax_channels_forward};
use crate::tensor::{BinaryMask, Tensor};
use crate::{Error, Result};

/// Smoothing constant of both Dice variants.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_dice: f64,
    pub lambda_ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_dice: 1.0,
            lambda_ce: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_dice) || !ok(self.lambda_ce) || self.lambda_dice + self.lambda_ce <= 0.0 {
            return Err(Error::ConfigInvalid(format!(
                "loss weights must be non-negative with a positive sum, got ({}, {})",
                self.lambda_dice, self.lambda_ce
            )));
        }
        Ok(())
    }
}

/// Settings of the self-supervised proxy tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct SslTaskConfig {
    pub mask_ratio: f64,
    pub mask_block: [usize; 3],
    pub num_rotations: usize,
    pub temperature: f64,
    pub embedding_dim: usize,
}

impl Default for SslTaskConfig {
    fn default() -> Self {
        SslTaskConfig {
            mask_ratio: 0.3,
            mask_block: [4, 4, 4],
            num_rotations: 4,
            temperature: 0.1,
            embedding_dim: 32,
        }
    }
}

impl SslTaskConfig {
    pub fn validate(&self, patch: [usize; 3]) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio must lie in (0,1), got {}", self.mask_ratio));
        }
        if self.mask_block.iter().zip(&patch).any(|(&b, &p)| b == 0 || b > p) {
            return bad(format!("mask_block {:?} must fit in patch {patch:?}", self.mask_block));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.embedding_dim < 2 {
            return bad("embedding_dim must be >= 2".into());
        }
        if !matches!(self.num_rotations, 2 | 4) {
            return bad(format!("num_rotations must be 2 or 4, got {}", self.num_rotations));
        }
        Ok(())
    }
}

fn check_same(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(what, b.shape(), a.shape()));
    }
    if a.rank() < 2 {
        return Err(Error::InvalidShape {
            shape: a.shape().to_vec(),
            reason: "expected a [labels, voxels...] tensor".into(),
        });
    }
    Ok(())
}

/// Overlap Dice loss on probabilities. The background channel (label 0) is
/// excluded whenever there is more than one label.
pub fn dice_loss(probs: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_same("dice target", probs, target)?;
    let j = probs.shape()[0];
    let n = probs.len() / j;
    let first = usize::from(j > 1);
    let count = (j - first) as f64;
    let (p, g) = (probs.data(), target.data());
    let mut grad = vec![0.0; probs.len()];
    let mut loss = 1.0;
    for c in first..j {
        let (pc, gc) = (&p[c * n..(c + 1) * n], &g[c * n..(c + 1) * n]);
        let inter: f64 = pc.iter().zip(gc).map(|(a, b)| a * b).sum();
        let denom = pc.iter().sum::<f64>() + gc.iter().sum::<f64>() + DICE_EPS;
        let num = 2.0 * inter + DICE_EPS;
        loss -= num / denom / count;
        for (gr, &gv) in grad[c * n..(c + 1) * n].iter_mut().zip(gc) {
            *gr = -(2.0 * gv * denom - num) / (denom * denom) / count;
        }
    }
    Ok((loss, Tensor::new(probs.shape(), grad)?))
}

/// Squared-denominator soft Dice over all labels.
pub fn soft_dice_loss(probs: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_same("soft dice target", probs, target)?;
    let j = probs.shape()[0];
    let n = probs.len() / j;
    let (y, g) = (probs.data(), target.data());
    let mut grad = vec![0.0; probs.len()];
    let mut loss = 1.0;
    let scale = 2.0 / j as f64;
    for c in 0..j {
        let (yc, gc) = (&y[c * n..(c + 1) * n], &g[c * n..(c + 1) * n]);
        let num: f64 = yc.iter().zip(gc).map(|(a, b)| a * b).sum();
        let denom = gc.iter().map(|v| v * v).sum::<f64>() + yc.iter().map(|v| v * v).sum::<f64>() + DICE_EPS;
        loss -= scale * num / denom;
        for ((gr, &yv), &gv) in grad[c * n..(c + 1) * n].iter_mut().zip(yc).zip(gc) {
            *gr = -scale * (gv * denom - num * 2.0 * yv) / (denom * denom);
        }
    }
    Ok((loss, Tensor::new(probs.shape(), grad)?))
}

/// Mean per-voxel cross-entropy of channel-softmaxed logits.
pub fn ce_loss(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    check_same("cross-entropy target", logits, target)?;
    let probs = softmax_channels_forward(logits);
    let j = logits.shape()[0];
    let n = logits.len() / j;
    let (x, t) = (logits.data(), target.data());
    let mut total = 0.0;
    for i in 0..n {
        let max = (0..j).map(|c| x[c * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..j).map(|c| (x[c * n + i] - max).exp()).sum::<f64>().ln();
        total += (0..j).map(|c| t[c * n + i] * (lse - x[c * n + i])).sum::<f64>();
    }
    let inv = 1.0 / n as f64;
    let grad = probs
        .data()
        .iter()
        .zip(t)
        .map(|(p, t)| (p - t) * inv)
        .collect();
    Ok((total * inv, Tensor::new(logits.shape(), grad)?))
}

/// `λ1·dice(softmax(logits)) + λ2·ce(logits)`; a zero weight skips its term.
pub fn combined_loss(logits: &Tensor, target: &Tensor, w: LossWeights) -> Result<(f64, Tensor)> {
    check_same("combined target", logits, target)?;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros_like(logits);
    if w.lambda_dice != 0.0 {
        let probs = softmax_channels_forward(logits);
        let (l, g) = dice_loss(&probs, target)?;
        let mut g = softmax_channels_backward(&probs, &g)?;
        g.scale(w.lambda_dice);
        loss += w.lambda_dice * l;
        grad.add_assign(&g);
    }
    if w.lambda_ce != 0.0 {
        let (l, mut g) = ce_loss(logits, target)?;
        g.scale(w.lambda_ce);
        loss += w.lambda_ce * l;
        grad.add_assign(&g);
    }
    Ok((loss, grad))
}

/// Mean squared error over the masked voxels (all channels).
pub fn inpainting_loss(recon: &Tensor, original: &Tensor, mask: &BinaryMask) -> Result<(f64, Tensor)> {
    if recon.shape() != original.shape() {
        return Err(Error::shape("inpainting original", recon.shape(), original.shape()));
    }
    if recon.spatial() != mask.shape() {
        return Err(Error::shape("inpainting mask", &recon.spatial(), &mask.shape()));
    }
    let hidden = mask.count();
    if hidden == 0 {
        return Err(Error::EmptyMask);
    }
    let channels = recon.len() / mask.len();
    let count = (hidden * channels) as f64;
    let m = mask.data();
    let n = mask.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; recon.len()];
    for (k, (r, o)) in recon.data().iter().zip(original.data()).enumerate() {
        if m[k % n] {
            let d = r - o;
            loss += d * d;
            grad[k] = 2.0 * d / count;
        }
    }
    Ok((loss / count, Tensor::new(recon.shape(), grad)?))
}

/// Cross-entropy of rotation logits `[K]` against the applied quarter-turn.
pub fn rotation_loss(logits: &Tensor, true_rotation: usize) -> Result<(f64, Tensor)> {
    let k = logits.len();
    if true_rotation >= k {
        return Err(Error::IndexOutOfRange {
            index: true_rotation,
            len: k,
        });
    }
    let x = logits.data();
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let grad = x
        .iter()
        .enumerate()
        .map(|(i, v)| (v - lse).exp() - f64::from(u8::from(i == true_rotation)))
        .collect();
    Ok((lse - x[true_rotation], Tensor::new(logits.shape(), grad)?))
}

/// Symmetric InfoNCE over cosine similarities.
///
/// The `2B` embeddings are L2-normalised; each one is an anchor whose
/// positive is its partner view and whose negatives are the other `2B − 2`
/// embeddings. The loss is the mean anchor cross-entropy. Gradients are
/// returned for `z_a` and `z_b` (pre-normalisation).
pub fn contrastive_loss(z_a: &[Tensor], z_b: &[Tensor], tau: f64) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    let b = z_a.len();
    if b < 2 || z_b.len() != b {
        return Err(Error::DegenerateBatch(b.min(z_b.len())));
    }
    let dim = z_a[0].len();
    let all: Vec<&Tensor> = z_a.iter().chain(z_b).collect();
    let mut units = Vec::with_capacity(2 * b);
    let mut norms = Vec::with_capacity(2 * b);
    for (k, z) in all.iter().enumerate() {
        if z.len() != dim {
            return Err(Error::shape("embedding", &[dim], z.shape()));
        }
        let norm = z.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroVector(k));
        }
        units.push(z.data().iter().map(|v| v / norm).collect::<Vec<f64>>());
        norms.push(norm);
    }
    let n = 2 * b;
    let partner = |k: usize| if k < b { k + b } else { k - b };
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let mut loss = 0.0;
    let mut du = vec![vec![0.0; dim]; n];
    let inv_n = 1.0 / n as f64;
    for k in 0..n {
        let sims: Vec<f64> = (0..n).map(|l| dot(&units[k], &units[l]) / tau).collect();
        let max = (0..n).filter(|&l| l != k).map(|l| sims[l]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).filter(|&l| l != k).map(|l| (sims[l] - max).exp()).sum();
        let lse = max + z.ln();
        loss += (lse - sims[partner(k)]) * inv_n;
        for l in (0..n).filter(|&l| l != k) {
            let soft = (sims[l] - lse).exp();
            let ds = inv_n * (soft - f64::from(u8::from(l == partner(k)))) / tau;
            for d in 0..dim {
                du[k][d] += ds * units[l][d];
                du[l][d] += ds * units[k][d];
            }
        }
    }
    let grads: Vec<Tensor> = (0..n)
        .map(|k| {
            let proj = dot(&units[k], &du[k]);
            let g = (0..dim).map(|d| (du[k][d] - units[k][d] * proj) / norms[k]).collect();
            Tensor::new(all[k].shape(), g).expect("embedding shape")
        })
        .collect();
    let mut grads = grads;
    let gb = grads.split_off(b);
    Ok((loss, grads, gb))
}
