#![allow(dead_code)]

use std::path::{Path, PathBuf};

use modfuse::Config;
use modfuse_core::model::ModelConfig;
use modfuse_core::synth::{generate_dataset, PhantomSpec};
use modfuse_core::PatchSpec;
use tempfile::TempDir;

/// Small phantoms that keep every workflow under a few seconds.
pub fn tiny_spec() -> PhantomSpec {
    PhantomSpec {
        shape: [16, 16, 16],
        radius: (2.0, 4.0),
        ..PhantomSpec::default()
    }
}

pub fn write_dataset(dir: &Path, n: usize, base_seed: u64) -> PathBuf {
    generate_dataset(&tiny_spec(), n, base_seed, dir).unwrap();
    dir.join("manifest.csv")
}

/// A temporary directory with a labelled and an unlabelled dataset, and a
/// config sized for them.
pub struct Fixture {
    pub dir: TempDir,
    pub cfg: Config,
}

impl Fixture {
    pub fn new(labelled: usize, unlabelled: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = Config::default();
        cfg.seed = 11;
        cfg.output_dir = dir.path().join("run");
        cfg.data.train_manifest = write_dataset(&dir.path().join("train"), labelled, 0);
        cfg.data.pretrain_manifest = write_dataset(&dir.path().join("pretrain"), unlabelled, 500);
        cfg.data.val_fraction = 0.25;
        cfg.data.holdout_fraction = 0.25;
        cfg.model = ModelConfig {
            num_levels: 2,
            base_channels: 4,
            ..ModelConfig::default()
        };
        cfg.train.patch = PatchSpec::cube(8);
        cfg.train.epochs = 3;
        cfg.train.val_every = 1;
        cfg.pretrain.patch = PatchSpec::cube(8);
        cfg.pretrain.batch_size = 2;
        cfg.pretrain.epochs = 2;
        cfg.pretrain.ssl.mask_block = [2, 2, 2];
        cfg.pretrain.ssl.embedding_dim = 8;
        cfg.predict.manifest = cfg.data.train_manifest.clone();
        cfg.eval.gt_manifest = cfg.data.train_manifest.clone();
        cfg.validate().unwrap();
        Fixture { dir, cfg }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// The fixture config writing into `name` under the temp directory.
    pub fn with_output(&self, name: &str) -> Config {
        let mut cfg = self.cfg.clone();
        cfg.output_dir = self.path(name);
        cfg
    }
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Every file under `dir` as `(relative path, bytes)`, sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), read(&p)));
            }
        }
    }
    out.sort();
    out
}
