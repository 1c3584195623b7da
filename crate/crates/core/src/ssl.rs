//! Self-supervised proxy heads and view generation.
//!
//! The heads read the fused encoder features of a [`Model`]:
//!
//! * a light reconstruction decoder on the bottleneck (transposed convs with
//!   leaky ReLU, then a 1×1×1 conv to `M` channels) for masked-volume
//!   inpainting;
//! * a linear classifier over axial quarter-turns;
//! * a linear projection for contrastive coding.
//!
//! Both linear heads read the global averages of the fused features at every
//! level, concatenated.
//!
//! Their parameters (`ssl.*`) live in the model's own store so that one
//! optimizer and one checkpoint cover the whole pretraining state.

use rand::seq::index::sample;
use rand::Rng;

use crate::losses::SslTaskConfig;
use crate::model::{EncodeTrace, Model};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, leaky_relu_backward, leaky_relu_forward, Conv, ConvTranspose, Linear,
    DEFAULT_NEGATIVE_SLOPE,
};
use crate::rng::SeededRng;
use crate::tensor::{BinaryMask, Tensor};
use crate::volume::{augment, random_crop, rotate_axial, AugmentConfig, PatchSpec, Volume};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct SslHeads {
    ups: Vec<ConvTranspose>,
    recon_out: Conv,
    rotation: Linear,
    projection: Linear,
    num_rotations: usize,
}

/// Outputs and cached activations of the heads for one view.
#[derive(Clone, Debug)]
pub struct SslOutputs {
    encode: EncodeTrace,
    up_inputs: Vec<Tensor>,
    up_outputs: Vec<Tensor>,
    pooled: Tensor,
    /// Reconstruction `[M, D, H, W]`.
    pub recon: Tensor,
    pub rotation_logits: Tensor,
    pub embedding: Tensor,
}

impl SslHeads {
    /// Registers the head parameters in `model`'s store.
    pub fn attach(model: &mut Model, cfg: &SslTaskConfig, rng: &mut SeededRng) -> Self {
        let mc = model.config().clone();
        let levels = mc.num_levels;
        let pooled: usize = (0..levels).map(|l| mc.channels(l)).sum();
        let store = model.params_mut();
        let ups = (0..levels - 1)
            .rev()
            .map(|l| ConvTranspose::new(store, &format!("ssl.recon.up{l}"), mc.channels(l + 1), mc.channels(l), rng))
            .collect();
        let recon_out = Conv::new(store, "ssl.recon.out", mc.channels(0), mc.num_modalities, 1, 1, rng);
        let rotation = Linear::new(store, "ssl.rot", pooled, cfg.num_rotations, rng);
        let projection = Linear::new(store, "ssl.proj", pooled, cfg.embedding_dim, rng);
        SslHeads {
            ups,
            recon_out,
            rotation,
            projection,
            num_rotations: cfg.num_rotations,
        }
    }

    pub fn num_rotations(&self) -> usize {
        self.num_rotations
    }

    pub fn forward(&self, model: &Model, inputs: &[Tensor]) -> Result<SslOutputs> {
        let store = model.params();
        let encode = model.encode(inputs)?;
        let b = encode.bottleneck().clone();
        let mut up_inputs = Vec::with_capacity(self.ups.len());
        let mut up_outputs = Vec::with_capacity(self.ups.len());
        let mut x = b.clone();
        for up in &self.ups {
            let y = up.forward(store, &x)?;
            up_inputs.push(x);
            x = leaky_relu_forward(&y, DEFAULT_NEGATIVE_SLOPE);
            up_outputs.push(y);
        }
        let recon = self.recon_out.forward(store, &x)?;
        let means: Vec<f64> = encode.fused().iter().flat_map(|f| global_avg_pool(f).into_data()).collect();
        let pooled = Tensor::new(&[means.len()], means)?;
        let rotation_logits = self.rotation.forward(store, &pooled)?;
        let embedding = self.projection.forward(store, &pooled)?;
        up_inputs.push(x);
        Ok(SslOutputs {
            encode,
            up_inputs,
            up_outputs,
            pooled,
            recon,
            rotation_logits,
            embedding,
        })
    }

    /// Adds the gradients of all involved parameters into `grads`, given the
    /// loss gradients on the three head outputs.
    pub fn backward(
        &self,
        model: &Model,
        out: &SslOutputs,
        grad_recon: &Tensor,
        grad_rotation: &Tensor,
        grad_embedding: &Tensor,
        grads: &mut [Tensor],
    ) -> Result<()> {
        let store = model.params();
        let last = out.up_inputs.last().expect("recon input");
        let mut g = self.recon_out.backward(store, last, grad_recon, grads)?;
        for (i, up) in self.ups.iter().enumerate().rev() {
            let gy = leaky_relu_backward(&out.up_outputs[i], &g, DEFAULT_NEGATIVE_SLOPE)?;
            g = up.backward(store, &out.up_inputs[i], &gy, grads)?;
        }
        let mut gp = self.rotation.backward(store, &out.pooled, grad_rotation, grads)?;
        gp.add_assign(&self.projection.backward(store, &out.pooled, grad_embedding, grads)?);
        let mut grad_fused = Vec::with_capacity(out.encode.fused().len());
        let mut offset = 0;
        for f in out.encode.fused() {
            let c = f.channels();
            let slice = Tensor::new(&[c], gp.data()[offset..offset + c].to_vec())?;
            grad_fused.push(Some(global_avg_pool_backward(f.shape(), &slice)));
            offset += c;
        }
        grad_fused.last_mut().expect("bottleneck").as_mut().expect("bottleneck grad").add_assign(&g);
        model.encode_backward(&out.encode, &grad_fused, grads)
    }
}

/// One masked view of a pretraining sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SslView {
    /// Per-modality network inputs with the masked voxels zeroed.
    pub input: Vec<Tensor>,
    /// Unmasked view `[M, D, H, W]` the reconstruction is scored against.
    pub target: Tensor,
    pub mask: BinaryMask,
}

/// Two views of one crop sharing a rotation class.
#[derive(Clone, Debug, PartialEq)]
pub struct SslSample {
    pub views: [SslView; 2],
    pub rotation: usize,
}

/// Non-overlapping grid-aligned cuboids of `cfg.mask_block`, chosen at
/// random until at least `cfg.mask_ratio` of the voxels are covered (or no
/// blocks remain).
pub fn inpainting_mask(shape: [usize; 3], cfg: &SslTaskConfig, rng: &mut SeededRng) -> BinaryMask {
    let b = cfg.mask_block;
    let cells = [shape[0] / b[0], shape[1] / b[1], shape[2] / b[2]];
    let total_cells = cells.iter().product::<usize>();
    let block_vol = b.iter().product::<usize>();
    let target = (cfg.mask_ratio * shape.iter().product::<usize>() as f64).ceil() as usize;
    let count = target.div_ceil(block_vol).min(total_cells);
    let mut mask = BinaryMask::filled(shape, false);
    for cell in sample(rng, total_cells, count).into_vec() {
        let c = [cell / (cells[1] * cells[2]), (cell / cells[2]) % cells[1], cell % cells[2]];
        for z in c[0] * b[0]..(c[0] + 1) * b[0] {
            for y in c[1] * b[1]..(c[1] + 1) * b[1] {
                for x in c[2] * b[2]..(c[2] + 1) * b[2] {
                    let i = mask.index(z, y, x);
                    mask.data_mut()[i] = true;
                }
            }
        }
    }
    mask
}

/// Zeroes the masked voxels of every modality.
pub fn apply_mask(modalities: &[Tensor], mask: &BinaryMask) -> Vec<Tensor> {
    modalities
        .iter()
        .map(|m| {
            let mut t = m.clone();
            for (v, &hidden) in t.data_mut().iter_mut().zip(mask.data()) {
                if hidden {
                    *v = 0.0;
                }
            }
            t
        })
        .collect()
}

/// Quarter-turns applied for rotation class `class` out of `num_rotations`.
pub fn quarter_turns(class: usize, num_rotations: usize) -> usize {
    class * (4 / num_rotations)
}

fn make_view(rotated: &Volume, cfg: &SslTaskConfig, aug: &AugmentConfig, rng: &mut SeededRng) -> Result<SslView> {
    let v = augment(rotated, &aug.intensity_only(), rng);
    let mask = inpainting_mask(v.shape(), cfg, rng);
    let refs: Vec<&Tensor> = v.modalities().iter().collect();
    Ok(SslView {
        input: apply_mask(v.modalities(), &mask),
        target: Tensor::concat_channels(&refs)?,
        mask,
    })
}

/// Crops, rotates and builds two independently augmented and masked views.
///
/// Only intensity augmentations are applied to the views; a spatial flip or
/// extra turn would change the rotation class being predicted.
pub fn make_sample(
    v: &Volume,
    patch: PatchSpec,
    cfg: &SslTaskConfig,
    aug: &AugmentConfig,
    rng: &mut SeededRng,
) -> Result<SslSample> {
    let crop = random_crop(v, patch, rng)?;
    let rotation = rng.random_range(0..cfg.num_rotations);
    let k = quarter_turns(rotation, cfg.num_rotations);
    let [_, h, w] = patch.size;
    if k % 2 == 1 && h != w {
        return Err(Error::ConfigInvalid(format!(
            "quarter-turn rotation needs a square axial patch, got {:?}",
            patch.size
        )));
    }
    let rotated = rotate_axial(&crop, k).without_mask();
    let a = make_view(&rotated, cfg, aug, rng)?;
    let b = make_view(&rotated, cfg, aug, rng)?;
    Ok(SslSample { views: [a, b], rotation })
}
