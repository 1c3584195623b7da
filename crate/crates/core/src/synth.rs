//! Deterministic multi-modal phantom generator.
//!
//! Each case is a background "anatomy" plus ellipsoidal lesions with a rim
//! (label 1) and a core (label 2, half the semi-axes). Sub-region `k` shows
//! its contrast only in modality `(k - 1) % M`; in every other modality its
//! intensity is `(1 - c)·lesion + c·anatomy` for complementarity `c`, so at
//! `c = 1` no single modality reveals the whole lesion.
//!
//! The anatomy is a sawtooth staircase along the `y` axis with a random
//! phase. Its direction gives every case an orientation, which is what makes
//! quarter-turn rotations recognisable.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::nifti::{write_nifti, CaseManifest, ManifestEntry};
use crate::rng::seeded;
use crate::tensor::{LabelGrid, Tensor};
use crate::volume::Volume;
use crate::{par, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub num_modalities: usize,
    /// Inclusive range of lesions per case.
    pub lesion_count: (usize, usize),
    /// Inclusive range of outer semi-axes in voxels.
    pub radius: (f64, f64),
    /// Intensity levels of the background staircase.
    pub background_levels: Vec<f64>,
    /// Width in voxels of each staircase step.
    pub step_width: usize,
    /// Mean intensity of sub-region `k` (label `k + 1`) in its own modality.
    pub lesion_means: Vec<f64>,
    pub complementarity: f64,
    pub noise_sigma: f64,
    pub num_labels: usize,
    pub spacing_mm: [f64; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [32, 32, 32],
            num_modalities: 2,
            lesion_count: (1, 3),
            radius: (3.0, 7.0),
            background_levels: vec![0.0, 0.5, 1.0],
            step_width: 2,
            lesion_means: vec![2.0, 3.0],
            complementarity: 1.0,
            noise_sigma: 0.1,
            num_labels: 3,
            spacing_mm: [1.0; 3],
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let infeasible = |m: String| Err(Error::SpecInfeasible(m));
        if self.num_modalities < 1 || self.num_labels < 2 {
            return infeasible("need at least one modality and two labels".into());
        }
        if self.lesion_means.len() != self.num_labels - 1 {
            return infeasible(format!(
                "{} lesion means for {} sub-region labels",
                self.lesion_means.len(),
                self.num_labels - 1
            ));
        }
        let (lo, hi) = self.lesion_count;
        if lo > hi {
            return infeasible(format!("lesion count range {lo}..={hi} is empty"));
        }
        let (rmin, rmax) = self.radius;
        if !(rmin >= 1.0 && rmin <= rmax && rmax.is_finite()) {
            return infeasible(format!("radius range {rmin}..={rmax} must satisfy 1 <= min <= max"));
        }
        if self.shape.iter().any(|&e| (e as f64) < 2.0 * rmax + 1.0) {
            return infeasible(format!("a lesion of radius {rmax} cannot fit in {:?}", self.shape));
        }
        if self.background_levels.is_empty() || self.step_width == 0 {
            return infeasible("background needs at least one level and a positive step width".into());
        }
        if !(0.0..=1.0).contains(&self.complementarity) || !(self.noise_sigma >= 0.0) {
            return infeasible("complementarity must lie in [0,1] and noise must be non-negative".into());
        }
        let sep = 3.0 * self.noise_sigma;
        for (i, &a) in self.lesion_means.iter().enumerate() {
            let clash = self.background_levels.iter().chain(&self.lesion_means[..i]).any(|&b| (a - b).abs() < sep.max(f64::EPSILON));
            if clash {
                return infeasible(format!("lesion mean {a} is within 3 sigma of another tissue"));
            }
        }
        Ok(())
    }

    /// Modality in which sub-region label `label` carries its contrast.
    pub fn home_modality(&self, label: u16) -> usize {
        (label as usize - 1) % self.num_modalities
    }

    fn anatomy(&self, y: usize, phase: usize) -> f64 {
        let n = self.background_levels.len();
        self.background_levels[((y + phase) / self.step_width) % n]
    }

    /// Noise-free intensity of a voxel with `label` in modality `m` over
    /// background value `anatomy`.
    pub fn tissue_mean(&self, label: u16, m: usize, anatomy: f64) -> f64 {
        if label == 0 {
            return anatomy;
        }
        let lesion = self.lesion_means[label as usize - 1];
        if self.home_modality(label) == m {
            lesion
        } else {
            let c = self.complementarity;
            (1.0 - c) * lesion + c * anatomy
        }
    }
}

/// Lesion geometry drawn for one case.
#[derive(Clone, Debug, PartialEq)]
pub struct Lesion {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

/// Generates one labelled case; fully determined by `(spec, seed)`.
pub fn generate_case(spec: &PhantomSpec, seed: u64) -> Result<Volume> {
    spec.validate()?;
    let mut rng = seeded(seed);
    let n = rng.random_range(spec.lesion_count.0..=spec.lesion_count.1);
    let lesions: Vec<Lesion> = (0..n)
        .map(|_| {
            let semi_axes: [f64; 3] = std::array::from_fn(|_| rng.random_range(spec.radius.0..=spec.radius.1));
            let center = std::array::from_fn(|i| {
                let r = semi_axes[i];
                let hi = spec.shape[i] as f64 - 1.0 - r;
                if hi > r {
                    rng.random_range(r..=hi)
                } else {
                    r
                }
            });
            Lesion { center, semi_axes }
        })
        .collect();
    let period = spec.background_levels.len() * spec.step_width;
    let phase = rng.random_range(0..period);

    let [d, h, w] = spec.shape;
    let mut mask = LabelGrid::filled(spec.shape, 0);
    let sub_labels = (spec.num_labels - 1) as u16;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                let mut label = 0u16;
                for les in &lesions {
                    let q: f64 = (0..3).map(|i| ((p[i] - les.center[i]) / les.semi_axes[i]).powi(2)).sum();
                    // q is the squared normalised radius; the core uses half-size axes
                    let l = if q <= 0.25 && sub_labels >= 2 {
                        2
                    } else if q <= 1.0 {
                        1
                    } else {
                        0
                    };
                    label = label.max(l);
                }
                let idx = mask.index(z, y, x);
                mask.data_mut()[idx] = label;
            }
        }
    }

    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).expect("valid sigma"));
    let modalities = (0..spec.num_modalities)
        .map(|m| {
            Tensor::from_fn(&[d, h, w], |i| {
                let y = (i / w) % h;
                let base = spec.tissue_mean(mask.data()[i], m, spec.anatomy(y, phase));
                match &noise {
                    Some(dist) => base + dist.sample(&mut rng),
                    None => base,
                }
            })
        })
        .collect();
    Volume::new(modalities, spec.spacing_mm, Some(mask))
}

pub fn case_id(index: usize) -> String {
    format!("case{index:04}")
}

/// Writes `n` cases (seeds `base_seed + i`) as NIfTI files plus
/// `manifest.csv` into `out_dir`. Manifest paths are relative to `out_dir`.
pub fn generate_dataset(spec: &PhantomSpec, n: usize, base_seed: u64, out_dir: &Path) -> Result<CaseManifest> {
    if n == 0 {
        return Err(Error::SpecInfeasible("dataset needs at least one case".into()));
    }
    spec.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cases = par::map(n, |i| generate_case(spec, base_seed + i as u64));
    let mut entries = Vec::with_capacity(n);
    for (i, case) in cases.into_iter().enumerate() {
        let case = case?;
        let id = case_id(i);
        let mut modality_paths = Vec::new();
        for (m, t) in case.modalities().iter().enumerate() {
            let name = PathBuf::from(format!("{id}_mod{m}.nii"));
            write_file(&out_dir.join(&name), &write_nifti(t, spec.spacing_mm))?;
            modality_paths.push(name);
        }
        let mask = case.mask().expect("generated cases carry a mask");
        let mask_name = PathBuf::from(format!("{id}_mask.nii"));
        write_file(&out_dir.join(&mask_name), &write_nifti(&label_tensor(mask), spec.spacing_mm))?;
        entries.push(ManifestEntry {
            case_id: id,
            modality_paths,
            mask_path: Some(mask_name),
        });
    }
    let manifest = CaseManifest { entries };
    write_file(&out_dir.join("manifest.csv"), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Label grid as a float tensor, for writing.
pub fn label_tensor(mask: &LabelGrid) -> Tensor {
    Tensor::new(&mask.shape(), mask.data().iter().map(|&l| l as f64).collect()).expect("grid shape")
}
