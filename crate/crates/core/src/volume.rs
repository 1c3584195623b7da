//! Multi-modal volumes plus the preprocessing and augmentation pipeline.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::rng::SeededRng;
use crate::tensor::{Grid, LabelGrid, Tensor};
use crate::{Error, Result};

const ZSCORE_EPS: f64 = 1e-8;

/// One case: `M` co-registered intensity channels and an optional label mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    modalities: Vec<Tensor>,
    spacing_mm: [f64; 3],
    mask: Option<LabelGrid>,
}

impl Volume {
    pub fn new(
        modalities: Vec<Tensor>,
        spacing_mm: [f64; 3],
        mask: Option<LabelGrid>,
    ) -> Result<Self> {
        let first = modalities.first().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "a volume needs at least one modality".into(),
        })?;
        if first.rank() != 3 {
            return Err(Error::InvalidShape {
                shape: first.shape().to_vec(),
                reason: "modalities must be 3-D".into(),
            });
        }
        let shape = first.spatial();
        for m in &modalities {
            if m.shape() != shape {
                return Err(Error::shape("modality", &shape, m.shape()));
            }
        }
        if let Some(mask) = &mask {
            if mask.shape() != shape {
                return Err(Error::shape("mask", &shape, &mask.shape()));
            }
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("spacing must be positive, got {spacing_mm:?}"),
            });
        }
        Ok(Volume {
            modalities,
            spacing_mm,
            mask,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.modalities[0].spatial()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn modalities(&self) -> &[Tensor] {
        &self.modalities
    }

    pub fn modality(&self, m: usize) -> &Tensor {
        &self.modalities[m]
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn mask(&self) -> Option<&LabelGrid> {
        self.mask.as_ref()
    }

    pub fn without_mask(mut self) -> Self {
        self.mask = None;
        self
    }

    /// Checks that every mask value is a valid label index.
    pub fn validate_labels(&self, num_labels: usize) -> Result<()> {
        if let Some(mask) = &self.mask {
            if let Some(&bad) = mask.data().iter().find(|&&l| l as usize >= num_labels) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    num_labels,
                });
            }
        }
        Ok(())
    }
}

/// Spatial extent `(d, h, w)` of a training patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub size: [usize; 3],
}

impl PatchSpec {
    pub fn new(size: [usize; 3]) -> Result<Self> {
        if size.contains(&0) {
            return Err(Error::ConfigInvalid(format!(
                "patch extents must be positive, got {size:?}"
            )));
        }
        Ok(PatchSpec { size })
    }

    pub fn cube(n: usize) -> Self {
        PatchSpec { size: [n; 3] }
    }

    /// Each extent must be divisible by `2^(levels-1)` so every stride-2
    /// stage halves it exactly.
    pub fn check_divisible(&self, num_levels: usize) -> Result<()> {
        let f = 1usize << (num_levels.saturating_sub(1));
        if self.size.iter().any(|&s| s % f != 0) {
            return Err(Error::ConfigInvalid(format!(
                "patch {:?} not divisible by {f} (required for {num_levels} levels)",
                self.size
            )));
        }
        Ok(())
    }

    pub fn voxels(&self) -> usize {
        self.size.iter().product()
    }
}

/// Per-modality z-score normalisation with population std and an ε guard.
pub fn zscore_normalize(v: &Volume) -> Volume {
    let modalities = v
        .modalities
        .iter()
        .map(|m| {
            let n = m.len() as f64;
            let mean = m.data().iter().sum::<f64>() / n;
            let var = m.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt().max(ZSCORE_EPS);
            m.map(|x| (x - mean) / std)
        })
        .collect();
    Volume {
        modalities,
        spacing_mm: v.spacing_mm,
        mask: v.mask.clone(),
    }
}

fn crop_slice<T: Copy>(data: &[T], shape: [usize; 3], off: [usize; 3], size: [usize; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(size.iter().product());
    for z in off[0]..off[0] + size[0] {
        for y in off[1]..off[1] + size[1] {
            let row = (z * shape[1] + y) * shape[2];
            out.extend_from_slice(&data[row + off[2]..row + off[2] + size[2]]);
        }
    }
    out
}

/// Extracts the sub-volume at `offset` (all modalities and the mask).
pub fn crop_at(v: &Volume, p: PatchSpec, offset: [usize; 3]) -> Result<Volume> {
    let shape = v.shape();
    if (0..3).any(|a| offset[a] + p.size[a] > shape[a]) {
        return Err(Error::PatchTooLarge {
            patch: p.size,
            volume: shape,
        });
    }
    let modalities = v
        .modalities
        .iter()
        .map(|m| Tensor::new(&p.size, crop_slice(m.data(), shape, offset, p.size)))
        .collect::<Result<Vec<_>>>()?;
    let mask = v
        .mask
        .as_ref()
        .map(|g| Grid::new(p.size, crop_slice(g.data(), shape, offset, p.size)))
        .transpose()?;
    Ok(Volume {
        modalities,
        spacing_mm: v.spacing_mm,
        mask,
    })
}

/// Draws crop offsets uniformly over the valid range.
pub fn random_offset(shape: [usize; 3], p: PatchSpec, rng: &mut SeededRng) -> Result<[usize; 3]> {
    if (0..3).any(|a| p.size[a] > shape[a]) {
        return Err(Error::PatchTooLarge {
            patch: p.size,
            volume: shape,
        });
    }
    let mut off = [0; 3];
    for a in 0..3 {
        off[a] = rng.random_range(0..=shape[a] - p.size[a]);
    }
    Ok(off)
}

pub fn random_crop(v: &Volume, p: PatchSpec, rng: &mut SeededRng) -> Result<Volume> {
    let off = random_offset(v.shape(), p, rng)?;
    crop_at(v, p, off)
}

/// Crop guaranteed to contain a uniformly chosen foreground voxel; falls back
/// to [`random_crop`] when the mask is absent or empty.
pub fn foreground_crop(v: &Volume, p: PatchSpec, rng: &mut SeededRng) -> Result<Volume> {
    let shape = v.shape();
    let fg: Vec<usize> = match &v.mask {
        Some(mask) => mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l > 0)
            .map(|(i, _)| i)
            .collect(),
        None => Vec::new(),
    };
    if fg.is_empty() {
        return random_crop(v, p, rng);
    }
    if (0..3).any(|a| p.size[a] > shape[a]) {
        return Err(Error::PatchTooLarge {
            patch: p.size,
            volume: shape,
        });
    }
    let idx = fg[rng.random_range(0..fg.len())];
    let centre = [idx / (shape[1] * shape[2]), (idx / shape[2]) % shape[1], idx % shape[2]];
    let mut off = [0; 3];
    for a in 0..3 {
        let lo = (centre[a] + 1).saturating_sub(p.size[a]);
        let hi = centre[a].min(shape[a] - p.size[a]);
        off[a] = rng.random_range(lo..=hi);
    }
    crop_at(v, p, off)
}

fn flip_slice<T: Copy>(data: &[T], shape: [usize; 3], axis: usize) -> Vec<T> {
    let [d, h, w] = shape;
    let mut out = Vec::with_capacity(data.len());
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let (sz, sy, sx) = match axis {
                    0 => (d - 1 - z, y, x),
                    1 => (z, h - 1 - y, x),
                    _ => (z, y, w - 1 - x),
                };
                out.push(data[(sz * h + sy) * w + sx]);
            }
        }
    }
    out
}

/// One axial quarter-turn: the voxel at `(z, y, x)` moves to `(z, x, H-1-y)`.
/// Returns the data in the new shape `(D, W, H)`.
fn quarter_turn<T: Copy>(data: &[T], shape: [usize; 3]) -> (Vec<T>, [usize; 3]) {
    let [d, h, w] = shape;
    let new_shape = [d, w, h];
    let mut out = vec![data[0]; data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let dst = (z * w + x) * h + (h - 1 - y);
                out[dst] = data[(z * h + y) * w + x];
            }
        }
    }
    (out, new_shape)
}

fn rotate_slice<T: Copy>(data: &[T], shape: [usize; 3], k: usize) -> (Vec<T>, [usize; 3]) {
    let mut cur = (data.to_vec(), shape);
    for _ in 0..k % 4 {
        cur = quarter_turn(&cur.0, cur.1);
    }
    cur
}

/// Flips every modality and the mask along `axis` (0 = z, 1 = y, 2 = x).
pub fn flip(v: &Volume, axis: usize) -> Volume {
    let shape = v.shape();
    Volume {
        modalities: v
            .modalities
            .iter()
            .map(|m| Tensor::new(&shape, flip_slice(m.data(), shape, axis)).expect("same shape"))
            .collect(),
        spacing_mm: v.spacing_mm,
        mask: v
            .mask
            .as_ref()
            .map(|g| Grid::new(shape, flip_slice(g.data(), shape, axis)).expect("same shape")),
    }
}

/// Applies `k` axial quarter-turns to every modality and the mask.
pub fn rotate_axial(v: &Volume, k: usize) -> Volume {
    let shape = v.shape();
    let modalities = v
        .modalities
        .iter()
        .map(|m| {
            let (data, s) = rotate_slice(m.data(), shape, k);
            Tensor::new(&s, data).expect("rotated shape")
        })
        .collect();
    let mask = v.mask.as_ref().map(|g| {
        let (data, s) = rotate_slice(g.data(), shape, k);
        Grid::new(s, data).expect("rotated shape")
    });
    let spacing_mm = if k % 2 == 1 {
        [v.spacing_mm[0], v.spacing_mm[2], v.spacing_mm[1]]
    } else {
        v.spacing_mm
    };
    Volume {
        modalities,
        spacing_mm,
        mask,
    }
}

/// Probabilities and magnitudes for [`augment`].
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Per-axis flip probability.
    pub p_flip: f64,
    /// Probability of a random non-zero number of axial quarter-turns.
    pub p_rotate: f64,
    /// Probability of a multiplicative scale `U(1-a, 1+a)` per modality.
    pub p_scale: f64,
    pub scale_range: f64,
    /// Probability of additive Gaussian noise per modality.
    pub p_noise: f64,
    pub noise_sigma: f64,
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            p_flip: 0.0,
            p_rotate: 0.0,
            p_scale: 0.0,
            scale_range: 0.0,
            p_noise: 0.0,
            noise_sigma: 0.0,
        }
    }

    /// Intensity-only subset (used where spatial orientation must be kept).
    pub fn intensity_only(&self) -> Self {
        AugmentConfig {
            p_flip: 0.0,
            p_rotate: 0.0,
            ..self.clone()
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_flip: 0.5,
            p_rotate: 0.5,
            p_scale: 0.3,
            scale_range: 0.1,
            p_noise: 0.3,
            noise_sigma: 0.05,
        }
    }
}

/// Random flips, axial quarter-turns, intensity scaling and noise.
///
/// Spatial transforms are index permutations applied identically to the mask;
/// intensity transforms never touch it. Quarter-turns other than 180° are
/// only drawn when the axial plane is square, so the shape never changes.
pub fn augment(v: &Volume, cfg: &AugmentConfig, rng: &mut SeededRng) -> Volume {
    let mut out = v.clone();
    for axis in 0..3 {
        if rng.random_bool(cfg.p_flip.clamp(0.0, 1.0)) {
            out = flip(&out, axis);
        }
    }
    if rng.random_bool(cfg.p_rotate.clamp(0.0, 1.0)) {
        let [_, h, w] = out.shape();
        let k = if h == w { rng.random_range(1..4) } else { 2 };
        out = rotate_axial(&out, k);
    }
    for m in out.modalities.iter_mut() {
        if rng.random_bool(cfg.p_scale.clamp(0.0, 1.0)) {
            let a = cfg.scale_range;
            let s = rng.random_range(1.0 - a..=1.0 + a);
            m.scale(s);
        }
        if rng.random_bool(cfg.p_noise.clamp(0.0, 1.0)) && cfg.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
            for x in m.data_mut() {
                *x += normal.sample(rng);
            }
        }
    }
    out
}

/// One-hot encodes a label grid into `(num_labels, D, H, W)`.
pub fn one_hot(mask: &LabelGrid, num_labels: usize) -> Result<Tensor> {
    let n = mask.len();
    let [d, h, w] = mask.shape();
    let mut data = vec![0.0; num_labels * n];
    for (i, &l) in mask.data().iter().enumerate() {
        let l = l as usize;
        if l >= num_labels {
            return Err(Error::LabelOutOfRange {
                label: l as u16,
                num_labels,
            });
        }
        data[l * n + i] = 1.0;
    }
    Tensor::new(&[num_labels, d, h, w], data)
}
