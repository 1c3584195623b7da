use modfuse_core::nifti::{load_manifest, read_nifti};
use modfuse_core::synth::{generate_case, generate_dataset, PhantomSpec};

const CUBE: usize = 32 * 32 * 32;

#[test]
fn lesion_fraction_within_geometric_bounds() {
    let spec = PhantomSpec::default();
    // Each lesion has semi-axes in [3, 7] and lies fully inside the volume.
    // The largest fits in a 15-voxel bounding box per axis; the smallest
    // contains an axis box of half-side 3/sqrt(3) > 1.5, i.e. >= 3 lattice
    // points per axis. The core (half axes >= 1.5) holds >= 1 lattice point.
    let lower = 27.0 / CUBE as f64;
    let upper = 3.0 * 15f64.powi(3) / CUBE as f64;
    for seed in 0..100 {
        let v = generate_case(&spec, seed).unwrap();
        let mask = v.mask().unwrap();
        let lesion = mask.data().iter().filter(|&&l| l > 0).count();
        let core = mask.data().iter().filter(|&&l| l == 2).count();
        let frac = lesion as f64 / CUBE as f64;
        assert!(frac >= lower && frac <= upper, "seed {seed}: fraction {frac}");
        assert!(core >= 1, "seed {seed}: no core voxels");
        assert!(mask.data().iter().all(|&l| l < 3));
    }
}

/// For label `label`, differences between its voxels and the background
/// voxels of the same case and row (rows share one anatomy level) in
/// modality `m`.
fn row_matched_differences(spec: &PhantomSpec, label: u16, m: usize, seeds: std::ops::Range<u64>) -> Vec<f64> {
    let [d, h, w] = spec.shape;
    let mut diffs = Vec::new();
    for seed in seeds {
        let v = generate_case(spec, seed).unwrap();
        let mask = v.mask().unwrap().data();
        let img = v.modality(m).data();
        let mut sum = vec![0.0; h];
        let mut count = vec![0usize; h];
        for i in 0..d * h * w {
            if mask[i] == 0 {
                let y = (i / w) % h;
                sum[y] += img[i];
                count[y] += 1;
            }
        }
        for i in 0..d * h * w {
            let y = (i / w) % h;
            if mask[i] == label && count[y] > 0 {
                diffs.push(img[i] - sum[y] / count[y] as f64);
            }
        }
    }
    diffs
}

#[test]
fn complementary_subregions_hide_outside_their_modality() {
    let spec = PhantomSpec::default();
    let sigma = spec.noise_sigma;
    for label in [1u16, 2] {
        let home = spec.home_modality(label);
        let other = 1 - home;
        let hidden = row_matched_differences(&spec, label, other, 0..20);
        assert!(hidden.len() >= 500, "label {label}: only {} voxels", hidden.len());
        let mean = hidden.iter().sum::<f64>() / hidden.len() as f64;
        assert!(mean.abs() < sigma / 2.0, "label {label} visible in modality {other}: {mean}");

        let shown = row_matched_differences(&spec, label, home, 0..20);
        let mean = shown.iter().sum::<f64>() / shown.len() as f64;
        assert!(mean >= 3.0 * sigma, "label {label} not separated in modality {home}: {mean}");
    }
}

#[test]
fn dataset_files_are_complete_deterministic_and_readable() {
    let spec = PhantomSpec::default();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&spec, 5, 100, a.path()).unwrap();
    generate_dataset(&spec, 5, 100, b.path()).unwrap();

    let mut ids: Vec<&str> = manifest.entries.iter().map(|e| e.case_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 5);
    let nii = std::fs::read_dir(a.path()).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "nii")).count();
    assert_eq!(nii, 5 * (spec.num_modalities + 1));

    for entry in std::fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap(), "{name:?}");
    }

    let text = std::fs::read_to_string(a.path().join("manifest.csv")).unwrap();
    assert_eq!(load_manifest(&text, spec.num_modalities).unwrap(), manifest);
    for (i, e) in manifest.entries.iter().enumerate() {
        let case = generate_case(&spec, 100 + i as u64).unwrap();
        for (m, p) in e.modality_paths.iter().enumerate() {
            let (_, t) = read_nifti(&std::fs::read(a.path().join(p)).unwrap()).unwrap();
            assert_eq!(t.shape(), &spec.shape);
            let rounded = case.modality(m).map(|x| x as f32 as f64);
            assert_eq!(t, rounded);
        }
        let (_, labels) = read_nifti(&std::fs::read(a.path().join(e.mask_path.as_ref().unwrap())).unwrap()).unwrap();
        let truth = case.mask().unwrap();
        assert!(labels.data().iter().zip(truth.data()).all(|(&x, &l)| x == l as f64));
    }
}
