mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::*;

fn modfuse(dir: &Path, threads: Option<&str>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_modfuse"));
    cmd.current_dir(dir).args(args).env("RUST_LOG", "warn");
    match threads {
        Some(t) => cmd.env("MODFUSE_THREADS", t),
        None => cmd.env_remove("MODFUSE_THREADS"),
    };
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A tiny on-disk config next to a generated dataset.
fn setup(extra: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&dir.path().join("data"), 6, 0);
    let conf = dir.path().join("tiny.conf");
    let text = format!(
        "run.seed = 4\n\
         model.num_levels = 2\n\
         model.base_channels = 4\n\
         data.train_manifest = data/manifest.csv\n\
         data.pretrain_manifest = data/manifest.csv\n\
         data.val_fraction = 0.34\n\
         data.holdout_fraction = 0.34\n\
         train.patch = 8,8,8\n\
         train.epochs = 2\n\
         pretrain.patch = 8,8,8\n\
         pretrain.batch_size = 2\n\
         pretrain.epochs = 1\n\
         ssl.mask_block = 2,2,2\n\
         ssl.embedding_dim = 8\n\
         predict.manifest = data/manifest.csv\n\
         eval.gt_manifest = data/manifest.csv\n\
         {extra}"
    );
    std::fs::write(&conf, text).unwrap();
    (dir, conf)
}

#[test]
fn unknown_key_exits_with_config_code() {
    let (dir, conf) = setup("train.learning_rate = 0.1\n");
    let o = modfuse(dir.path(), None, &["--config", conf.to_str().unwrap(), "train"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("train.learning_rate"));
}

#[test]
fn invalid_value_exits_with_config_code() {
    let (dir, conf) = setup("data.val_fraction = 1.5\n");
    let o = modfuse(dir.path(), None, &["--config", conf.to_str().unwrap(), "train"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn bad_thread_count_exits_with_config_code() {
    let (dir, conf) = setup("");
    for bad in ["0", "many"] {
        let o = modfuse(dir.path(), Some(bad), &["--config", conf.to_str().unwrap(), "train"]);
        assert_eq!(code(&o), 2, "{bad}: {}", stderr(&o));
        assert!(stderr(&o).contains("MODFUSE_THREADS"));
    }
}

#[test]
fn missing_or_empty_manifest_exits_with_data_code() {
    let (dir, conf) = setup("");
    let c = conf.to_str().unwrap();
    std::fs::write(dir.path().join("empty.csv"), "").unwrap();
    let mut conf2 = std::fs::read_to_string(&conf).unwrap();
    conf2 = conf2.replace("data.train_manifest = data/manifest.csv", "data.train_manifest = empty.csv");
    std::fs::write(dir.path().join("empty.conf"), conf2).unwrap();
    let o = modfuse(dir.path(), None, &["--config", "empty.conf", "train"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let o = modfuse(dir.path(), None, &["--config", c, "evaluate", "--manifest", "nowhere.csv"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("nowhere.csv"));
}

#[test]
fn missing_prediction_is_named() {
    let (dir, conf) = setup("");
    let preds = dir.path().join("preds");
    std::fs::create_dir_all(&preds).unwrap();
    let o = modfuse(
        dir.path(),
        None,
        &["--config", conf.to_str().unwrap(), "evaluate", "--pred-dir", preds.to_str().unwrap()],
    );
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("case0000"), "{}", stderr(&o));
}

#[test]
fn generate_data_is_deterministic() {
    let (dir, conf) = setup("synth.shape = 16,16,16\n");
    let c = conf.to_str().unwrap();
    for out in ["g1", "g2"] {
        let o = modfuse(dir.path(), None, &["--config", c, "--out", out, "generate-data", "--num-cases", "3", "--base-seed", "9"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = snapshot(&dir.path().join("g1"));
    assert_eq!(a.len(), 3 * 3 + 1);
    assert_eq!(a, snapshot(&dir.path().join("g2")));
}

#[test]
fn full_workflow_is_thread_invariant() {
    let (dir, conf) = setup("");
    let c = conf.to_str().unwrap();
    let run = |threads: &str, out: &str| {
        let o = modfuse(dir.path(), Some(threads), &["--config", c, "--out", out, "pretrain"]);
        assert_eq!(code(&o), 0, "pretrain: {}", stderr(&o));
        let init = format!("{out}/pretrain.ckpt");
        let o = modfuse(dir.path(), Some(threads), &["--config", c, "--out", out, "train", "--init", &init]);
        assert_eq!(code(&o), 0, "train: {}", stderr(&o));
        let ck = format!("{out}/best.ckpt");
        let o = modfuse(dir.path(), Some(threads), &["--config", c, "--out", out, "predict", "--checkpoint", &ck]);
        assert_eq!(code(&o), 0, "predict: {}", stderr(&o));
        let preds = format!("{out}/predictions");
        let o = modfuse(dir.path(), Some(threads), &["--config", c, "--out", out, "evaluate", "--pred-dir", &preds]);
        assert_eq!(code(&o), 0, "evaluate: {}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("aggregate"));
        snapshot(&dir.path().join(out))
    };
    let one = run("1", "t1");
    let three = run("3", "t3");
    assert!(one.iter().any(|(p, _)| p.ends_with("metrics.kv")));
    assert_eq!(one, three);
}
