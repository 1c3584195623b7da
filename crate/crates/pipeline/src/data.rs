//! Case loading, normalisation and deterministic splits.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use modfuse_core::nifti::{load_manifest, read_nifti, CaseManifest, ManifestEntry};
use modfuse_core::rng::SeededRng;
use modfuse_core::volume::zscore_normalize;
use modfuse_core::{par, Error, LabelGrid, Tensor, Volume};

use crate::error::{PipelineError, Result};

/// A loaded case with z-scored modalities.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub volume: Volume,
}

/// Reads and parses a manifest; paths inside it are relative to its directory.
pub fn read_manifest(path: &Path, num_modalities: usize) -> Result<(CaseManifest, PathBuf)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest = load_manifest(&text, num_modalities)?;
    if manifest.entries.is_empty() {
        return Err(PipelineError::EmptyManifest(path.to_path_buf()));
    }
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((manifest, base))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_tensor(path: &Path) -> Result<(Tensor, [f64; 3])> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, t) = read_nifti(&bytes)?;
    Ok((t, header.spacing()))
}

/// Converts a float grid holding non-negative integers to labels.
pub fn to_labels(t: &Tensor, path: &Path) -> Result<LabelGrid> {
    let data = t
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v <= u16::MAX as f64 && v.fract() == 0.0 {
                Ok(v as u16)
            } else {
                Err(PipelineError::InvalidData(format!("{} holds non-label value {v}", path.display())))
            }
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(LabelGrid::new(t.spatial(), data)?)
}

pub fn read_labels(path: &Path) -> Result<LabelGrid> {
    let (t, _) = read_tensor(path)?;
    to_labels(&t, path)
}

/// Loads one case without normalisation. The mask is read only when
/// `with_mask` is set; a missing mask is then an error.
pub fn load_raw(entry: &ManifestEntry, base: &Path, with_mask: bool) -> Result<Volume> {
    let mut modalities = Vec::with_capacity(entry.modality_paths.len());
    let mut spacing = [1.0; 3];
    for (i, p) in entry.modality_paths.iter().enumerate() {
        let (t, s) = read_tensor(&resolve(base, p))?;
        if i == 0 {
            spacing = s;
        }
        modalities.push(t);
    }
    let mask = if with_mask {
        let p = entry
            .mask_path
            .as_ref()
            .ok_or_else(|| PipelineError::InvalidData(format!("case `{}` has no mask", entry.case_id)))?;
        Some(read_labels(&resolve(base, p))?)
    } else {
        None
    };
    Ok(Volume::new(modalities, spacing, mask)?)
}

/// Loads every case of a manifest in parallel, z-scoring each modality.
pub fn load_cases(path: &Path, num_modalities: usize, num_labels: Option<usize>) -> Result<Vec<Case>> {
    let (manifest, base) = read_manifest(path, num_modalities)?;
    let entries = &manifest.entries;
    par::map(entries.len(), |i| {
        let v = load_raw(&entries[i], &base, num_labels.is_some())?;
        if let Some(j) = num_labels {
            v.validate_labels(j)?;
        }
        Ok(Case {
            id: entries[i].case_id.clone(),
            volume: zscore_normalize(&v),
        })
    })
    .into_iter()
    .collect()
}

/// Shuffles `0..n` and takes `round(fraction·n)` indices (at least one, and
/// leaving at least one) as the held-out part. Both parts are returned in
/// ascending order.
pub fn split_indices(n: usize, fraction: f64, rng: &mut SeededRng) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(PipelineError::InvalidData(format!("need at least 2 cases to split, got {n}")));
    }
    let held = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut held_out = order[..held].to_vec();
    let mut kept = order[held..].to_vec();
    held_out.sort_unstable();
    kept.sort_unstable();
    Ok((kept, held_out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use modfuse_core::rng::seeded;

    #[test]
    fn split_is_a_partition() {
        let (a, b) = split_indices(50, 0.2, &mut seeded(1)).unwrap();
        assert_eq!((a.len(), b.len()), (40, 10));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(split_indices(50, 0.2, &mut seeded(1)).unwrap().1, b);
    }

    #[test]
    fn split_keeps_both_sides_non_empty() {
        let (a, b) = split_indices(2, 0.01, &mut seeded(0)).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert!(split_indices(1, 0.5, &mut seeded(0)).is_err());
    }

    #[test]
    fn labels_reject_fractions() {
        let t = Tensor::new(&[1, 1, 2], vec![1.0, 0.5]).unwrap();
        assert!(to_labels(&t, Path::new("m.nii")).is_err());
        let t = Tensor::new(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(to_labels(&t, Path::new("m.nii")).unwrap().data(), &[1, 2]);
    }
}
