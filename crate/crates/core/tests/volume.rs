mod common;

use common::rng;
use modfuse_core::volume::{augment, crop_at, one_hot, zscore_normalize, AugmentConfig};
use modfuse_core::{LabelGrid, PatchSpec, Tensor, Volume};
use proptest::prelude::*;
use rand::Rng;

fn shape3() -> impl Strategy<Value = [usize; 3]> {
    [1usize..=6, 1usize..=6, 1usize..=6]
}

fn volume(shape: [usize; 3], m: usize, labels: u16, seed: u64) -> Volume {
    let mut r = rng(seed);
    let n = shape.iter().product();
    let mods = (0..m)
        .map(|_| Tensor::from_fn(&shape, |_| r.random_range(-3.0..7.0)))
        .collect();
    let mask = LabelGrid::new(shape, (0..n).map(|_| r.random_range(0..labels)).collect()).unwrap();
    Volume::new(mods, [1.0, 1.5, 2.0], Some(mask)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flat_index_round_trips(shape in prop::collection::vec(1usize..=5, 1..=5), pick in any::<prop::sample::Index>()) {
        let t = Tensor::zeros(&shape);
        let flat = pick.index(t.len());
        let idx = t.unravel(flat);
        prop_assert_eq!(t.offset(&idx), flat);
        prop_assert_eq!(t.unravel(t.offset(&idx)), idx);
    }

    #[test]
    fn zscore_is_idempotent(shape in shape3(), m in 1usize..=3, seed in any::<u64>()) {
        let v = volume(shape, m, 3, seed);
        let once = zscore_normalize(&v);
        let twice = zscore_normalize(&once);
        for (a, b) in once.modalities().iter().zip(twice.modalities()) {
            prop_assert!(a.max_abs_diff(b) <= 1e-6);
        }
        prop_assert_eq!(once.mask(), v.mask());
    }

    #[test]
    fn crop_commutes_with_one_hot(shape in shape3(), seed in any::<u64>(), fz in 0.0f64..1.0, fy in 0.0f64..1.0, fx in 0.0f64..1.0) {
        let v = volume(shape, 1, 4, seed);
        let size = [1 + (fz * shape[0] as f64) as usize % shape[0], 1 + (fy * shape[1] as f64) as usize % shape[1], 1 + (fx * shape[2] as f64) as usize % shape[2]];
        let off = [shape[0] - size[0], (shape[1] - size[1]) / 2, 0];
        let p = PatchSpec::new(size).unwrap();
        let cropped = crop_at(&v, p, off).unwrap();
        let a = one_hot(cropped.mask().unwrap(), 4).unwrap();
        let full = one_hot(v.mask().unwrap(), 4).unwrap();
        let b = Tensor::from_fn(&[4, size[0], size[1], size[2]], |i| {
            let idx = a.unravel(i);
            full.get(&[idx[0], idx[1] + off[0], idx[2] + off[1], idx[3] + off[2]])
        });
        prop_assert_eq!(a, b);
    }

    #[test]
    fn augment_keeps_shape_and_label_subset(shape in shape3(), seed in any::<u64>(), aug_seed in any::<u64>()) {
        let v = volume(shape, 2, 3, seed);
        let cfg = AugmentConfig { p_flip: 0.5, p_rotate: 0.7, p_scale: 0.5, scale_range: 0.2, p_noise: 0.5, noise_sigma: 0.1 };
        let out = augment(&v, &cfg, &mut rng(aug_seed));
        prop_assert_eq!(out.shape(), v.shape());
        prop_assert_eq!(out.num_modalities(), 2);
        let before: std::collections::BTreeSet<u16> = v.mask().unwrap().data().iter().copied().collect();
        let after: std::collections::BTreeSet<u16> = out.mask().unwrap().data().iter().copied().collect();
        prop_assert!(after.is_subset(&before));
        // spatial transforms are permutations, so label counts are preserved
        let mut a: Vec<u16> = v.mask().unwrap().data().to_vec();
        let mut b: Vec<u16> = out.mask().unwrap().data().to_vec();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }
}
