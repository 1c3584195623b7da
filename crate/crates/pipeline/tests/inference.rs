mod common;

use common::*;
use modfuse::evaluate::{cmd_evaluate, METRICS_KV, METRICS_TEXT};
use modfuse::predict::{argmax_labels, cmd_predict, pred_path, predict_case, sliding_window_probs};
use modfuse::PipelineError;
use modfuse_core::metrics::{parse_kv, Metric, Region};
use modfuse_core::model::{Model, ModelConfig};
use modfuse_core::nifti::{load_manifest, read_nifti, write_nifti_as, Datatype};
use modfuse_core::rng::seeded;
use modfuse_core::synth::label_tensor;
use modfuse_core::{par, LabelGrid, PatchSpec, Tensor};
use rand::Rng;

fn tiny_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        num_levels: 2,
        base_channels: 4,
        ..ModelConfig::default()
    };
    Model::build(&cfg, &mut seeded(seed)).unwrap()
}

fn noise(shape: [usize; 3], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::from_fn(&shape, |_| rng.random_range(-2.0..2.0))
}

/// Window origins enumerated independently: every multiple of the half
/// patch that fits, plus the flush last position.
fn oracle_starts(extent: usize, patch: usize) -> Vec<usize> {
    let mut s: Vec<usize> = (0..extent).step_by(patch / 2).filter(|&o| o + patch <= extent).collect();
    if *s.last().unwrap() != extent - patch {
        s.push(extent - patch);
    }
    s
}

/// Brute force: per-voxel lists of window probabilities, averaged at the end.
fn oracle_probs(model: &Model, mods: &[Tensor], patch: [usize; 3]) -> Vec<Vec<f64>> {
    let [d, h, w] = mods[0].spatial();
    let j = model.config().num_labels;
    let mut lists: Vec<Vec<Vec<f64>>> = vec![Vec::new(); d * h * w];
    for &z0 in &oracle_starts(d, patch[0]) {
        for &y0 in &oracle_starts(h, patch[1]) {
            for &x0 in &oracle_starts(w, patch[2]) {
                let inputs: Vec<Tensor> = mods
                    .iter()
                    .map(|m| {
                        Tensor::from_fn(&patch, |i| {
                            let (z, y, x) = (i / (patch[1] * patch[2]), i / patch[2] % patch[1], i % patch[2]);
                            m.get(&[z0 + z, y0 + y, x0 + x])
                        })
                    })
                    .collect();
                let logits = model.predict(&inputs).unwrap();
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        for x in 0..patch[2] {
                            let l: Vec<f64> = (0..j).map(|c| logits.get(&[c, z, y, x])).collect();
                            let mx = l.iter().cloned().fold(f64::MIN, f64::max);
                            let e: Vec<f64> = l.iter().map(|v| (v - mx).exp()).collect();
                            let s: f64 = e.iter().sum();
                            lists[((z0 + z) * h + y0 + y) * w + x0 + x].push(e.iter().map(|v| v / s).collect::<Vec<_>>());
                        }
                    }
                }
            }
        }
    }
    lists
        .into_iter()
        .map(|ws| {
            assert!(!ws.is_empty(), "voxel never covered");
            (0..j).map(|c| ws.iter().map(|p| p[c]).sum::<f64>() / ws.len() as f64).collect()
        })
        .collect()
}

#[test]
fn sliding_window_matches_brute_force() {
    let model = tiny_model(3);
    for (k, (shape, patch)) in [([24, 24, 24], [16, 16, 16]), ([12, 10, 8], [8, 8, 4])].into_iter().enumerate() {
        let mods: Vec<Tensor> = (0..2).map(|m| noise(shape, 40 + 2 * k as u64 + m)).collect();
        let probs = sliding_window_probs(&model, &mods, PatchSpec::new(patch).unwrap()).unwrap();
        let j = model.config().num_labels;
        assert_eq!(probs.shape(), &[j, shape[0], shape[1], shape[2]]);
        let oracle = oracle_probs(&model, &mods, patch);
        let n = shape.iter().product::<usize>();
        for (v, expect) in oracle.iter().enumerate() {
            for c in 0..j {
                let got = probs.data()[c * n + v];
                assert!((got - expect[c]).abs() < 1e-10, "voxel {v} label {c}: {got} vs {}", expect[c]);
            }
        }
    }
}

#[test]
fn single_window_is_one_forward_pass() {
    let model = tiny_model(5);
    let mods: Vec<Tensor> = (0..2).map(|m| noise([8, 8, 8], 60 + m)).collect();
    let pred = predict_case(&model, &mods, PatchSpec::cube(8), &[Region::new("whole", &[1, 2])]).unwrap();
    let logits = model.predict(&mods).unwrap();
    let direct = argmax_labels(&logits);
    assert_eq!(pred.labels, direct);
    assert_eq!(pred.labels.shape(), [8, 8, 8]);
}

#[test]
fn sliding_window_is_thread_invariant() {
    let model = tiny_model(9);
    let mods: Vec<Tensor> = (0..2).map(|m| noise([16, 12, 12], 80 + m)).collect();
    let patch = PatchSpec::cube(8);
    let a = par::with_threads(1, || sliding_window_probs(&model, &mods, patch)).unwrap();
    let b = par::with_threads(3, || sliding_window_probs(&model, &mods, patch)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn input_contract_errors() {
    let model = tiny_model(1);
    let one = vec![noise([8, 8, 8], 1)];
    assert!(sliding_window_probs(&model, &one, PatchSpec::cube(8)).is_err());
    let small: Vec<Tensor> = (0..2).map(|m| noise([8, 8, 4], m)).collect();
    let err = sliding_window_probs(&model, &small, PatchSpec::cube(8)).err().unwrap();
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn predicted_lesion_is_the_union_of_regions() {
    let f = Fixture::new(4, 2);
    let ck = f.path("model.ckpt");
    tiny_model(2).to_checkpoint().save(&ck).unwrap();
    let mut cfg = f.with_output("pred");
    cfg.predict.checkpoint = ck;
    let dir = cmd_predict(&cfg).unwrap();
    let manifest = load_manifest(&String::from_utf8(read(&cfg.predict.manifest)).unwrap(), 2).unwrap();
    for e in &manifest.entries {
        let id = &e.case_id;
        let labels = read_nifti(&read(&pred_path(&dir, id))).unwrap().1;
        let lesion = read_nifti(&read(&dir.join(format!("{id}_lesion.nii")))).unwrap().1;
        let whole = read_nifti(&read(&dir.join(format!("{id}_whole.nii")))).unwrap().1;
        let core = read_nifti(&read(&dir.join(format!("{id}_core.nii")))).unwrap().1;
        for i in 0..labels.len() {
            let l = labels.data()[i];
            assert_eq!(whole.data()[i], f64::from(u8::from(l == 1.0 || l == 2.0)));
            assert_eq!(core.data()[i], f64::from(u8::from(l == 2.0)));
            assert_eq!(lesion.data()[i], whole.data()[i].max(core.data()[i]));
        }
    }
}

fn gt_grid(f: &Fixture, id: &str) -> LabelGrid {
    let t = read_nifti(&read(&f.path(&format!("train/{id}_mask.nii")))).unwrap().1;
    LabelGrid::new(t.spatial(), t.data().iter().map(|&v| v as u16).collect()).unwrap()
}

fn write_pred(dir: &std::path::Path, id: &str, grid: &LabelGrid) {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(pred_path(dir, id), write_nifti_as(&label_tensor(grid), [1.0; 3], Datatype::Int16)).unwrap();
}

#[test]
fn evaluating_ground_truth_scores_one() {
    let f = Fixture::new(3, 2);
    let mut cfg = f.with_output("eval");
    cfg.eval.pred_dir = f.path("preds");
    for id in ["case0000", "case0001", "case0002"] {
        write_pred(&cfg.eval.pred_dir, id, &gt_grid(&f, id));
    }
    let report = cmd_evaluate(&cfg).unwrap();
    for m in Metric::ALL {
        assert_eq!(report.aggregate(m), (1.0, 0.0), "{}", m.name());
    }
    assert!(cfg.output_dir.join(METRICS_TEXT).is_file());
}

#[test]
fn planted_errors_give_hand_computed_scores() {
    let f = Fixture::new(2, 2);
    let mut cfg = f.with_output("eval");
    cfg.eval.pred_dir = f.path("preds");
    let gt0 = gt_grid(&f, "case0000");
    write_pred(&cfg.eval.pred_dir, "case0000", &gt0);

    // Relabel k background voxels of the second case as label 2.
    let gt1 = gt_grid(&f, "case0001");
    let mut pred1 = gt1.clone();
    let k = 7;
    let bg: Vec<usize> = (0..gt1.data().len()).filter(|&i| gt1.data()[i] == 0).take(k).collect();
    for &i in &bg {
        pred1.data_mut()[i] = 2;
    }
    write_pred(&cfg.eval.pred_dir, "case0001", &pred1);

    let report = cmd_evaluate(&cfg).unwrap();
    let n = gt1.data().len() as f64;
    let whole = gt1.data().iter().filter(|&&l| l > 0).count() as f64;
    let core = gt1.data().iter().filter(|&&l| l == 2).count() as f64;
    let k = k as f64;
    let dsc = |tp: f64| 2.0 * tp / (2.0 * tp + k);
    let acc = |_tp: f64| (n - k) / n;
    let spec = |tp: f64| (n - tp - k) / (n - tp);
    let prec = |tp: f64| tp / (tp + k);
    let case1 = &report.cases[1];
    let expect = |f: &dyn Fn(f64) -> f64| (f(whole) + f(core)) / 2.0;
    let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    close(case1.mean(Metric::Dsc), expect(&dsc));
    close(case1.mean(Metric::Acc), expect(&acc));
    close(case1.mean(Metric::Se), 1.0);
    close(case1.mean(Metric::Sp), expect(&spec));
    close(case1.mean(Metric::Pre), expect(&prec));
    let (mean, std) = report.aggregate(Metric::Dsc);
    close(mean, (1.0 + expect(&dsc)) / 2.0);
    close(std, (1.0 - expect(&dsc)) / 2.0);

    let kv = parse_kv(&String::from_utf8(read(&cfg.output_dir.join(METRICS_KV))).unwrap()).unwrap();
    let get = |key: &str| kv.iter().find(|(k, _)| k == key).unwrap_or_else(|| panic!("{key}")).1;
    assert!((get("case0001.whole.dsc") - dsc(whole)).abs() <= 5e-7);
    assert!((get("case0001.core.pre") - prec(core)).abs() <= 5e-7);
    assert!((get("aggregate.mean.dsc") - mean).abs() <= 5e-7);
}

#[test]
fn missing_prediction_names_the_case() {
    let f = Fixture::new(2, 2);
    let mut cfg = f.with_output("eval");
    cfg.eval.pred_dir = f.path("preds");
    write_pred(&cfg.eval.pred_dir, "case0000", &gt_grid(&f, "case0000"));
    let err = cmd_evaluate(&cfg).err().unwrap();
    assert!(matches!(&err, PipelineError::MissingCase(id) if id == "case0001"));
    assert!(err.to_string().contains("case0001"));
    assert_eq!(err.exit_code(), 3);
}
