//! Sliding-window inference and the `predict` workflow.

use std::path::{Path, PathBuf};

use modfuse_core::checkpoint::Checkpoint;
use modfuse_core::metrics::Region;
use modfuse_core::model::{LoadMode, Model, ModelConfig};
use modfuse_core::nifti::{write_nifti_as, Datatype};
use modfuse_core::nn::softmax_channels_forward;
use modfuse_core::rng::seeded;
use modfuse_core::synth::label_tensor;
use modfuse_core::{par, BinaryMask, Error, LabelGrid, PatchSpec, Tensor};

use crate::config::Config;
use crate::data::{load_raw, read_manifest};
use crate::error::Result;

/// Window origins along one axis: stride `p/2` from 0, with the last window
/// flush against the far edge.
pub fn window_starts(extent: usize, patch: usize) -> Vec<usize> {
    assert!(patch >= 1 && patch <= extent, "window {patch} vs extent {extent}");
    let stride = (patch / 2).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + patch < extent).collect();
    starts.push(extent - patch);
    starts
}

fn extract(t: &Tensor, origin: [usize; 3], size: [usize; 3]) -> Tensor {
    let [_, h, w] = t.spatial();
    let src = t.data();
    let mut out = Vec::with_capacity(size.iter().product());
    for z in 0..size[0] {
        for y in 0..size[1] {
            let row = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
            out.extend_from_slice(&src[row..row + size[2]]);
        }
    }
    Tensor::new(&size, out).expect("window shape")
}

/// Per-label probabilities `[J, D, H, W]` averaged uniformly over
/// half-overlapping windows of `patch`.
pub fn sliding_window_probs(model: &Model, modalities: &[Tensor], patch: PatchSpec) -> Result<Tensor> {
    let cfg = model.config();
    if modalities.len() != cfg.num_modalities {
        return Err(Error::ModalityCountMismatch {
            expected: cfg.num_modalities,
            actual: modalities.len(),
        }
        .into());
    }
    let shape = modalities[0].spatial();
    if (0..3).any(|a| patch.size[a] > shape[a]) {
        return Err(Error::PatchTooLarge {
            patch: patch.size,
            volume: shape,
        }
        .into());
    }
    let axes: Vec<Vec<usize>> = (0..3).map(|a| window_starts(shape[a], patch.size[a])).collect();
    let mut origins = Vec::new();
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &x in &axes[2] {
                origins.push([z, y, x]);
            }
        }
    }
    let windows = par::map(origins.len(), |i| {
        let inputs: Vec<Tensor> = modalities.iter().map(|m| extract(m, origins[i], patch.size)).collect();
        model.predict(&inputs).map(|logits| softmax_channels_forward(&logits))
    });

    let j = cfg.num_labels;
    let [d, h, w] = shape;
    let n = d * h * w;
    let mut sum = vec![0.0; j * n];
    let mut count = vec![0u32; n];
    let [pd, ph, pw] = patch.size;
    let pn = pd * ph * pw;
    for (origin, probs) in origins.iter().zip(windows) {
        let probs = probs?;
        let p = probs.data();
        for z in 0..pd {
            for y in 0..ph {
                let dst = ((origin[0] + z) * h + origin[1] + y) * w + origin[2];
                let src = (z * ph + y) * pw;
                for x in 0..pw {
                    count[dst + x] += 1;
                    for c in 0..j {
                        sum[c * n + dst + x] += p[c * pn + src + x];
                    }
                }
            }
        }
    }
    for c in 0..j {
        for (s, &k) in sum[c * n..(c + 1) * n].iter_mut().zip(&count) {
            *s /= k as f64;
        }
    }
    Ok(Tensor::new(&[j, d, h, w], sum)?)
}

/// Per-voxel argmax over channels; ties go to the lower label.
pub fn argmax_labels(probs: &Tensor) -> LabelGrid {
    let j = probs.shape()[0];
    let n = probs.len() / j;
    let p = probs.data();
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..j {
                if p[c * n + i] > p[best * n + i] {
                    best = c;
                }
            }
            best as u16
        })
        .collect();
    LabelGrid::new(probs.spatial(), data).expect("grid shape")
}

/// Label grid, one binary mask per region and their union.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: LabelGrid,
    pub regions: Vec<(String, BinaryMask)>,
    pub lesion: BinaryMask,
}

pub fn predict_case(model: &Model, modalities: &[Tensor], patch: PatchSpec, regions: &[Region]) -> Result<Prediction> {
    let labels = argmax_labels(&sliding_window_probs(model, modalities, patch)?);
    let regions: Vec<(String, BinaryMask)> = regions.iter().map(|r| (r.name.clone(), r.mask(&labels))).collect();
    let mut lesion = BinaryMask::filled(labels.shape(), false);
    for (_, m) in &regions {
        for (u, &v) in lesion.data_mut().iter_mut().zip(m.data()) {
            *u |= v;
        }
    }
    Ok(Prediction { labels, regions, lesion })
}

/// Loads a full model from a checkpoint, using the config stored inside it.
pub fn load_model(path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    let cfg = ModelConfig::from_checkpoint(&ck)?;
    Ok(Model::from_checkpoint(&ck, &cfg, LoadMode::Full, &mut seeded(0))?)
}

pub fn pred_path(dir: &Path, case_id: &str) -> PathBuf {
    dir.join(format!("{case_id}_pred.nii"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn mask_tensor(m: &BinaryMask) -> Tensor {
    Tensor::new(&m.shape(), m.data().iter().map(|&b| f64::from(u8::from(b))).collect()).expect("grid shape")
}

/// Predicts every case of `cfg.predict.manifest` with `cfg.predict.checkpoint`
/// and writes `{id}_pred.nii`, `{id}_{region}.nii` and `{id}_lesion.nii`
/// into `output_dir/predictions`. Returns that directory.
pub fn cmd_predict(cfg: &Config) -> Result<PathBuf> {
    let model = load_model(&cfg.predict.checkpoint)?;
    let m = model.config().num_modalities;
    let (manifest, base) = read_manifest(&cfg.predict.manifest, m)?;
    let out = cfg.output_dir.join("predictions");
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    for entry in &manifest.entries {
        let v = modfuse_core::volume::zscore_normalize(&load_raw(entry, &base, false)?);
        let pred = predict_case(&model, v.modalities(), cfg.train.patch, &cfg.eval.regions)?;
        let spacing = v.spacing_mm();
        let id = &entry.case_id;
        write(&pred_path(&out, id), &write_nifti_as(&label_tensor(&pred.labels), spacing, Datatype::Int16))?;
        for (name, mask) in &pred.regions {
            let p = out.join(format!("{id}_{name}.nii"));
            write(&p, &write_nifti_as(&mask_tensor(mask), spacing, Datatype::Int16))?;
        }
        let p = out.join(format!("{id}_lesion.nii"));
        write(&p, &write_nifti_as(&mask_tensor(&pred.lesion), spacing, Datatype::Int16))?;
        log::info!("predicted {id}: {} lesion voxels", pred.lesion.count());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_cover_the_axis() {
        assert_eq!(window_starts(16, 16), vec![0]);
        assert_eq!(window_starts(24, 16), vec![0, 8]);
        assert_eq!(window_starts(32, 16), vec![0, 8, 16]);
        assert_eq!(window_starts(20, 8), vec![0, 4, 8, 12]);
        assert_eq!(window_starts(21, 8), vec![0, 4, 8, 12, 13]);
        assert_eq!(window_starts(3, 1), vec![0, 1, 2]);
    }

    #[test]
    fn argmax_prefers_lower_label_on_ties() {
        let p = Tensor::new(&[2, 1, 1, 2], vec![0.5, 0.2, 0.5, 0.8]).unwrap();
        assert_eq!(argmax_labels(&p).data(), &[0, 1]);
    }
}
