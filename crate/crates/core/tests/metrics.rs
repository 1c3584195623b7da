mod common;

use common::rng;
use modfuse_core::metrics::{confusion, evaluate, evaluate_all, parse_kv, ConfusionCounts, Metric, Region};
use modfuse_core::rng::SeededRng;
use modfuse_core::{BinaryMask, LabelGrid};
use proptest::prelude::*;
use rand::Rng;

const S: usize = 8;

/// Per-voxel triple loop with the empty-set conventions written out longhand.
fn oracle(pred: &BinaryMask, gt: &BinaryMask) -> [f64; 5] {
    let (mut p_and_g, mut p_only, mut g_only, mut neither) = (0.0, 0.0, 0.0, 0.0);
    for z in 0..S {
        for y in 0..S {
            for x in 0..S {
                match (pred.get(z, y, x), gt.get(z, y, x)) {
                    (true, true) => p_and_g += 1.0,
                    (true, false) => p_only += 1.0,
                    (false, true) => g_only += 1.0,
                    (false, false) => neither += 1.0,
                }
            }
        }
    }
    let size_p = p_and_g + p_only;
    let size_g = p_and_g + g_only;
    let size_not_g = p_only + neither;
    let dsc = if size_p + size_g == 0.0 { 1.0 } else { 2.0 * p_and_g / (size_p + size_g) };
    let acc = (p_and_g + neither) / (S * S * S) as f64;
    let se = if size_g == 0.0 { 1.0 } else { p_and_g / size_g };
    let sp = if size_not_g == 0.0 { 1.0 } else { neither / size_not_g };
    let pre = if size_p == 0.0 {
        if size_g == 0.0 { 1.0 } else { 0.0 }
    } else {
        p_and_g / size_p
    };
    [dsc, acc, se, sp, pre]
}

fn random_mask(r: &mut impl Rng, density: f64) -> BinaryMask {
    BinaryMask::new([S; 3], (0..S * S * S).map(|_| r.random_bool(density)).collect()).unwrap()
}

fn metrics(c: &ConfusionCounts) -> [f64; 5] {
    Metric::ALL.map(|m| m.of(c))
}

#[test]
fn thousand_random_pairs_match_oracle() {
    let mut r = rng(2024);
    // densities include exact emptiness and fullness so every convention is hit
    let densities = [0.0, 1.0, 0.002, 0.05, 0.3, 0.5, 0.9, 0.999];
    let mut non_degenerate = 0;
    for i in 0..1000 {
        let pred = random_mask(&mut r, densities[i % densities.len()]);
        let gt = random_mask(&mut r, densities[(i / densities.len()) % densities.len()]);
        let got = metrics(&confusion(&pred, &gt).unwrap());
        let want = oracle(&pred, &gt);
        for k in 0..5 {
            assert!((got[k] - want[k]).abs() < 1e-12, "pair {i} metric {k}: {} vs {}", got[k], want[k]);
            assert!((0.0..=1.0).contains(&got[k]));
        }
        let [dsc, _, se, _, pre] = got;
        if pre + se > 0.0 && pred.count() > 0 && gt.count() > 0 {
            non_degenerate += 1;
            assert!((dsc - 2.0 * pre * se / (pre + se)).abs() < 1e-12);
        }
    }
    assert!(non_degenerate > 500);
}

#[test]
fn evaluate_matches_oracle_per_region() {
    let mut r = rng(5);
    let grid = |r: &mut SeededRng| LabelGrid::new([S; 3], (0..S * S * S).map(|_| r.random_range(0..3u16)).collect()).unwrap();
    let regions = [Region::new("whole", &[1, 2]), Region::new("core", &[2])];
    let cases: Vec<(String, LabelGrid, LabelGrid)> = (0..6).map(|i| (format!("c{i}"), grid(&mut r), grid(&mut r))).collect();
    let report = evaluate_all(&cases, &regions).unwrap();
    for ((id, p, g), case) in cases.iter().zip(&report.cases) {
        assert_eq!(&case.case_id, id);
        for (region, (name, vals)) in regions.iter().zip(&case.regions) {
            assert_eq!(&region.name, name);
            let want = oracle(&region.mask(p), &region.mask(g));
            for (k, m) in Metric::ALL.iter().enumerate() {
                assert!((vals.get(*m) - want[k]).abs() < 1e-12);
            }
        }
        assert_eq!(evaluate(p, g, &regions).unwrap().cases[0].regions, case.regions);
    }
    for m in Metric::ALL {
        let per_case: Vec<f64> = report.cases.iter().map(|c| c.mean(m)).collect();
        let (mean, std) = report.aggregate(m);
        let lo = per_case.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = per_case.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(mean >= lo - 1e-15 && mean <= hi + 1e-15);
        assert!(std >= 0.0);
    }
    let parsed = parse_kv(&report.to_kv()).unwrap();
    let lookup = |k: &str| parsed.iter().find(|(key, _)| key == k).unwrap().1;
    let dsc = report.cases[0].regions[1].1.get(Metric::Dsc);
    assert!((lookup("c0.core.dsc") - dsc).abs() <= 5e-7);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn swapping_roles_swaps_se_and_pre(seed in any::<u64>(), dp in 0.0f64..1.0, dg in 0.0f64..1.0) {
        let mut r = rng(seed);
        let pred = random_mask(&mut r, dp);
        let gt = random_mask(&mut r, dg);
        let a = metrics(&confusion(&pred, &gt).unwrap());
        let b = metrics(&confusion(&gt, &pred).unwrap());
        prop_assert_eq!(a[0], b[0]);
        prop_assert_eq!(a[1], b[1]);
        // the declared empty-set conventions are asymmetric when exactly one
        // mask is empty, so the se/pre exchange is checked elsewhere
        if (pred.count() == 0) == (gt.count() == 0) {
            prop_assert_eq!(a[2], b[4]);
            prop_assert_eq!(a[4], b[2]);
        }
    }

    #[test]
    fn common_voxel_permutation_changes_nothing(seed in any::<u64>(), dp in 0.0f64..1.0, dg in 0.0f64..1.0) {
        let mut r = rng(seed);
        let pred = random_mask(&mut r, dp);
        let gt = random_mask(&mut r, dg);
        let mut perm: Vec<usize> = (0..S * S * S).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let shuffle = |m: &BinaryMask| BinaryMask::new([S; 3], perm.iter().map(|&i| m.data()[i]).collect()).unwrap();
        prop_assert_eq!(confusion(&pred, &gt).unwrap(), confusion(&shuffle(&pred), &shuffle(&gt)).unwrap());
    }

    #[test]
    fn f1_identity_on_random_counts(tp in 0u64..1000, tn in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
        let c = ConfusionCounts { tp, tn, fp, fn_ };
        let [dsc, acc, se, sp, pre] = metrics(&c);
        for v in [dsc, acc, se, sp, pre] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if tp + fp > 0 && tp + fn_ > 0 && pre + se > 0.0 {
            prop_assert!((dsc - 2.0 * pre * se / (pre + se)).abs() < 1e-12);
        }
    }
}
