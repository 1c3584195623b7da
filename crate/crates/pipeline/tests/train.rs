mod common;

use std::collections::BTreeSet;

use common::*;
use modfuse::pretrain::{cmd_pretrain, Pretrainer};
use modfuse::train::{cmd_train, Trainer, EPOCH_TRACE, LAST_CHECKPOINT, STEP_TRACE};
use modfuse::PipelineError;
use modfuse_core::checkpoint::Checkpoint;
use modfuse_core::model::{LoadMode, Model, ModelConfig};
use modfuse_core::nifti::load_manifest;
use modfuse_core::par;
use modfuse_core::rng::seeded;

#[test]
fn reruns_are_bit_identical_at_any_thread_count() {
    let f = Fixture::new(8, 4);
    let runs: Vec<_> = [1, 3, 1]
        .iter()
        .enumerate()
        .map(|(i, &threads)| {
            let cfg = f.with_output(&format!("run{i}"));
            let out = par::with_threads(threads, || cmd_train(&cfg, false)).unwrap();
            (out.state, snapshot(&cfg.output_dir))
        })
        .collect();
    assert_eq!(runs[0].0.step_losses.len(), 3 * 3);
    for r in &runs[1..] {
        let bits = |s: &modfuse::train::RunState| s.step_losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&r.0), bits(&runs[0].0));
        assert_eq!(r.1, runs[0].1, "output files differ");
    }
}

#[test]
fn resumed_run_continues_the_same_trace() {
    let f = Fixture::new(8, 4);
    let mut cfg = f.with_output("full");
    cfg.train.epochs = 4;
    cmd_train(&cfg, false).unwrap();

    let mut split = cfg.clone();
    split.output_dir = f.path("split");
    let mut t = Trainer::new(&split).unwrap();
    t.run_epoch().unwrap();
    t.run_epoch().unwrap();
    drop(t);
    let resumed = Trainer::resume(&split).unwrap();
    assert_eq!(resumed.state().epoch, 2);
    cmd_train(&split, true).unwrap();
    assert_eq!(snapshot(&cfg.output_dir), snapshot(&split.output_dir));
}

#[test]
fn resume_rejects_another_seed() {
    let f = Fixture::new(8, 4);
    let cfg = f.with_output("a");
    cmd_train(&cfg, false).unwrap();
    let mut other = cfg.clone();
    other.seed += 1;
    let err = Trainer::resume(&other).err().unwrap();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn traces_are_internally_consistent() {
    let f = Fixture::new(8, 4);
    let cfg = f.cfg.clone();
    let out = cmd_train(&cfg, false).unwrap();
    let state = &out.state;
    assert_eq!(state.epoch_losses.len(), state.epoch);
    assert_eq!(state.val_dsc.len(), state.epoch);

    let steps = std::fs::read_to_string(cfg.output_dir.join(STEP_TRACE)).unwrap();
    let mut per_epoch: Vec<Vec<f64>> = vec![Vec::new(); state.epoch];
    for line in steps.lines().skip(1) {
        let v: Vec<&str> = line.split(',').collect();
        per_epoch[v[0].parse::<usize>().unwrap()].push(v[2].parse().unwrap());
    }
    let epochs = std::fs::read_to_string(cfg.output_dir.join(EPOCH_TRACE)).unwrap();
    for (e, line) in epochs.lines().skip(1).enumerate() {
        let v: Vec<&str> = line.split(',').collect();
        let recorded: f64 = v[1].parse().unwrap();
        let steps = &per_epoch[e];
        let mean = steps.iter().sum::<f64>() / steps.len() as f64;
        assert_eq!(recorded.to_bits(), mean.to_bits(), "epoch {e}");
        assert_eq!(recorded.to_bits(), state.epoch_losses[e].to_bits());
    }

    let (best_epoch, best_dsc) = state.best.unwrap();
    let dscs: Vec<f64> = state.val_dsc.iter().map(|v| v.unwrap()).collect();
    assert_eq!(dscs[best_epoch], best_dsc);
    assert!(dscs.iter().all(|&d| d <= best_dsc));
    let best = Checkpoint::load(&out.best).unwrap();
    assert_eq!(best.meta("run.best_epoch").unwrap(), best_epoch.to_string());
    let last = Checkpoint::load(&out.last).unwrap();
    assert_eq!(last.meta("run.best_path"), Some("best.ckpt"));
}

#[test]
fn validation_cases_never_reach_training() {
    let f = Fixture::new(8, 4);
    let t = Trainer::new(&f.cfg).unwrap();
    let train: BTreeSet<&str> = t.train_ids().into_iter().collect();
    let val: BTreeSet<&str> = t.val_ids().into_iter().collect();
    assert!(train.is_disjoint(&val));
    assert_eq!((train.len(), val.len()), (6, 2));
    let text = std::fs::read_to_string(&f.cfg.data.train_manifest).unwrap();
    let all: BTreeSet<String> = load_manifest(&text, 2).unwrap().entries.into_iter().map(|e| e.case_id).collect();
    let union: BTreeSet<String> = train.union(&val).map(|s| s.to_string()).collect();
    assert_eq!(union, all);
}

#[test]
fn empty_manifest_is_a_data_error() {
    let f = Fixture::new(8, 4);
    let mut cfg = f.cfg.clone();
    let empty = f.path("empty.csv");
    std::fs::write(&empty, "# nothing here\n").unwrap();
    cfg.data.train_manifest = empty.clone();
    let err = Trainer::new(&cfg).err().unwrap();
    assert!(matches!(&err, PipelineError::EmptyManifest(p) if *p == empty));
    assert_eq!(err.exit_code(), 3);
    cfg.data.pretrain_manifest = empty;
    assert!(matches!(cmd_pretrain(&cfg, false), Err(PipelineError::EmptyManifest(_))));
}

#[test]
fn pretraining_smoke_and_determinism() {
    let f = Fixture::new(8, 8);
    let a = f.with_output("pa");
    let b = f.with_output("pb");
    let out = cmd_pretrain(&a, false).unwrap();
    assert_eq!(out.trace.epochs(), 2);
    assert!(out.trace.rotation_accuracy.iter().all(|&v| (0.0..=1.0).contains(&v)));
    let ck = Checkpoint::load(&out.checkpoint).unwrap();
    let cfg = ModelConfig::from_checkpoint(&ck).unwrap();
    Model::from_checkpoint(&ck, &cfg, LoadMode::Full, &mut seeded(0)).unwrap();

    let again = par::with_threads(3, || cmd_pretrain(&b, false)).unwrap();
    assert_eq!(again.trace, out.trace);
    assert_eq!(snapshot(&a.output_dir), snapshot(&b.output_dir));
}

#[test]
fn pretraining_resumes_exactly() {
    let f = Fixture::new(8, 8);
    let mut full = f.with_output("full");
    full.pretrain.epochs = 3;
    cmd_pretrain(&full, false).unwrap();
    let mut split = full.clone();
    split.output_dir = f.path("split");
    let mut p = Pretrainer::new(&split).unwrap();
    p.run_epoch().unwrap();
    drop(p);
    cmd_pretrain(&split, true).unwrap();
    assert_eq!(snapshot(&full.output_dir), snapshot(&split.output_dir));
}

#[test]
fn pretrained_encoders_seed_training_exactly() {
    let f = Fixture::new(8, 8);
    let pre = f.with_output("pre");
    let ck_path = cmd_pretrain(&pre, false).unwrap().checkpoint;
    let ck = Checkpoint::load(&ck_path).unwrap();

    let mut cfg = f.with_output("ft");
    cfg.train.init = Some(ck_path);
    let t = Trainer::new(&cfg).unwrap();
    let scratch = Trainer::new(&f.cfg).unwrap();
    let enc: BTreeSet<String> = t.model().encoder_param_ids().into_iter().collect();
    assert!(!enc.is_empty());
    for (p, q) in t.model().params().params().iter().zip(scratch.model().params().params()) {
        if enc.contains(&p.id) {
            let src = ck.tensor(&p.id).unwrap();
            assert_eq!(&p.value, src, "{}", p.id);
            assert_ne!(&p.value, &q.value, "{} was not pretrained", p.id);
        } else {
            assert_eq!(p.value, q.value, "{} should keep its fresh initialisation", p.id);
        }
    }
}

#[test]
fn incompatible_init_is_a_config_error() {
    let f = Fixture::new(8, 8);
    let pre = f.with_output("pre");
    let ck_path = cmd_pretrain(&pre, false).unwrap().checkpoint;
    let mut cfg = f.with_output("ft");
    cfg.model.base_channels = 8;
    cfg.train.init = Some(ck_path);
    let err = Trainer::new(&cfg).err().unwrap();
    assert!(matches!(err, PipelineError::IncompatibleInit(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn soft_dice_and_adamw_variants_train() {
    let f = Fixture::new(8, 4);
    let mut cfg = f.with_output("variant");
    cfg.train.loss = modfuse::config::LossKind::SoftDice;
    cfg.train.optim.kind = modfuse::config::OptimizerKind::AdamW;
    cfg.train.optim.lr = 1e-3;
    cfg.train.optim.schedule = modfuse_core::optim::ScheduleKind::Cosine;
    let out = cmd_train(&cfg, false).unwrap();
    assert!(out.state.step_losses.iter().all(|l| l.is_finite() && *l <= 1.0 + 1e-12));
    let last = Checkpoint::load(&cfg.output_dir.join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(last.meta("optim.kind"), Some("adamw"));
}
