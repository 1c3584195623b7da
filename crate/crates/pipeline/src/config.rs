//! Run configuration.
//!
//! The file format is flat UTF-8 `section.key = value` lines. `#` starts a
//! comment, blank lines are ignored, lists are comma separated and relative
//! paths resolve against the directory of the config file. Unknown keys are
//! an error. Every key has a default, so an empty file is a valid config for
//! the desk-scale synthetic benchmark.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use modfuse_core::losses::{LossWeights, SslTaskConfig};
use modfuse_core::metrics::Region;
use modfuse_core::model::{EncoderTransfer, Fusion, ModelConfig, Variant};
use modfuse_core::optim::{ScheduleKind, ScheduleSpec};
use modfuse_core::synth::PhantomSpec;
use modfuse_core::volume::AugmentConfig;
use modfuse_core::PatchSpec;

use crate::error::{PipelineError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adamw" => Ok(OptimizerKind::AdamW),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Weighted Dice plus cross-entropy.
    Combined,
    SoftDice,
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "combined" => Ok(LossKind::Combined),
            "soft_dice" => Ok(LossKind::SoftDice),
            other => Err(format!("unknown loss `{other}`")),
        }
    }
}

/// Optimizer and learning-rate schedule of one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub eta_min: f64,
}

impl OptimConfig {
    pub fn schedule_spec(&self, epochs: usize) -> ScheduleSpec {
        match self.schedule {
            ScheduleKind::Poly => ScheduleSpec::poly(self.lr, epochs),
            ScheduleKind::Cosine => ScheduleSpec::cosine(self.lr, epochs, self.eta_min),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub pretrain_manifest: PathBuf,
    pub train_manifest: PathBuf,
    /// Share of the labelled cases held out for validation.
    pub val_fraction: f64,
    /// Share of the pretraining cases held out for rotation accuracy.
    pub holdout_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub patch: PatchSpec,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` means one pass over the cases.
    pub steps_per_epoch: Option<usize>,
    pub val_every: usize,
    pub foreground_fraction: f64,
    pub optim: OptimConfig,
    pub loss: LossKind,
    pub weights: LossWeights,
    /// Encoder checkpoint to start from.
    pub init: Option<PathBuf>,
    pub init_mode: EncoderTransfer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub patch: PatchSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: Option<usize>,
    pub optim: OptimConfig,
    pub ssl: SslTaskConfig,
    /// Weights of the inpainting, rotation and contrastive losses.
    pub task_weights: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub spec: PhantomSpec,
    pub num_cases: usize,
    pub base_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictConfig {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub regions: Vec<Region>,
    pub pred_dir: PathBuf,
    pub gt_manifest: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub augment: AugmentConfig,
    pub synth: SynthConfig,
    pub predict: PredictConfig,
    pub eval: EvalConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            output_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            data: DataConfig {
                pretrain_manifest: PathBuf::from("data/pretrain/manifest.csv"),
                train_manifest: PathBuf::from("data/train/manifest.csv"),
                val_fraction: 0.2,
                holdout_fraction: 0.2,
            },
            train: TrainConfig {
                patch: PatchSpec::cube(16),
                batch_size: 2,
                epochs: 200,
                steps_per_epoch: None,
                val_every: 1,
                foreground_fraction: 0.5,
                optim: OptimConfig {
                    kind: OptimizerKind::Sgd,
                    lr: 1e-2,
                    momentum: 0.95,
                    weight_decay: 3e-5,
                    schedule: ScheduleKind::Poly,
                    eta_min: 0.0,
                },
                loss: LossKind::Combined,
                weights: LossWeights::default(),
                init: None,
                init_mode: EncoderTransfer::PerModality,
            },
            pretrain: PretrainConfig {
                patch: PatchSpec::cube(16),
                batch_size: 4,
                epochs: 50,
                steps_per_epoch: None,
                optim: OptimConfig {
                    kind: OptimizerKind::AdamW,
                    lr: 1e-3,
                    momentum: 0.0,
                    weight_decay: 1e-4,
                    schedule: ScheduleKind::Cosine,
                    eta_min: 0.0,
                },
                ssl: SslTaskConfig::default(),
                task_weights: [1.0, 1.0, 1.0],
            },
            augment: AugmentConfig::default(),
            synth: SynthConfig {
                spec: PhantomSpec::default(),
                num_cases: 50,
                base_seed: 0,
            },
            predict: PredictConfig {
                checkpoint: PathBuf::from("out/best.ckpt"),
                manifest: PathBuf::from("data/train/manifest.csv"),
            },
            eval: EvalConfig {
                regions: default_regions(),
                pred_dir: PathBuf::from("out/predictions"),
                gt_manifest: PathBuf::from("data/train/manifest.csv"),
            },
        }
    }
}

/// Lesion regions of the three-label phantom: the whole lesion and its core.
pub fn default_regions() -> Vec<Region> {
    vec![Region::new("whole", &[1, 2]), Region::new("core", &[2])]
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::ConfigFile {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Config::parse(&text, base)
    }

    /// Parses config text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut f = Fields::read(text, base)?;
        let mut c = Config::default();

        f.set("run.seed", &mut c.seed)?;
        f.path("run.output_dir", &mut c.output_dir)?;

        let m = &mut c.model;
        f.set("model.num_modalities", &mut m.num_modalities)?;
        f.set("model.num_labels", &mut m.num_labels)?;
        f.set("model.num_levels", &mut m.num_levels)?;
        f.set("model.base_channels", &mut m.base_channels)?;
        f.parsed("model.fusion", &mut m.fusion, Fusion::from_str)?;
        f.parsed("model.skip_fusion", &mut m.skip_fusion, Fusion::from_str)?;
        f.parsed("model.variant", &mut m.variant, Variant::from_str)?;

        f.path("data.pretrain_manifest", &mut c.data.pretrain_manifest)?;
        f.path("data.train_manifest", &mut c.data.train_manifest)?;
        f.set("data.val_fraction", &mut c.data.val_fraction)?;
        f.set("data.holdout_fraction", &mut c.data.holdout_fraction)?;

        let t = &mut c.train;
        f.patch("train.patch", &mut t.patch)?;
        f.set("train.batch_size", &mut t.batch_size)?;
        f.set("train.epochs", &mut t.epochs)?;
        f.optional("train.steps_per_epoch", &mut t.steps_per_epoch)?;
        f.set("train.val_every", &mut t.val_every)?;
        f.set("train.foreground_fraction", &mut t.foreground_fraction)?;
        f.optim("train", &mut t.optim)?;
        f.set("loss.kind", &mut t.loss)?;
        f.set("loss.lambda_dice", &mut t.weights.lambda_dice)?;
        f.set("loss.lambda_ce", &mut t.weights.lambda_ce)?;
        if let Some(p) = f.take("train.init") {
            t.init = Some(f.resolve(&p));
        }
        if let Some(v) = f.take("train.init_mode") {
            t.init_mode = parse_init_mode(&v).map_err(|r| PipelineError::value("train.init_mode", r))?;
        }

        let p = &mut c.pretrain;
        f.patch("pretrain.patch", &mut p.patch)?;
        f.set("pretrain.batch_size", &mut p.batch_size)?;
        f.set("pretrain.epochs", &mut p.epochs)?;
        f.optional("pretrain.steps_per_epoch", &mut p.steps_per_epoch)?;
        f.optim("pretrain", &mut p.optim)?;
        f.set("ssl.mask_ratio", &mut p.ssl.mask_ratio)?;
        if let Some(v) = f.take("ssl.mask_block") {
            p.ssl.mask_block = parse_triple(&v).map_err(|r| PipelineError::value("ssl.mask_block", r))?;
        }
        f.set("ssl.num_rotations", &mut p.ssl.num_rotations)?;
        f.set("ssl.temperature", &mut p.ssl.temperature)?;
        f.set("ssl.embedding_dim", &mut p.ssl.embedding_dim)?;
        f.set("ssl.weight_inpainting", &mut p.task_weights[0])?;
        f.set("ssl.weight_rotation", &mut p.task_weights[1])?;
        f.set("ssl.weight_contrastive", &mut p.task_weights[2])?;

        let a = &mut c.augment;
        f.set("augment.p_flip", &mut a.p_flip)?;
        f.set("augment.p_rotate", &mut a.p_rotate)?;
        f.set("augment.p_scale", &mut a.p_scale)?;
        f.set("augment.scale_range", &mut a.scale_range)?;
        f.set("augment.p_noise", &mut a.p_noise)?;
        f.set("augment.noise_sigma", &mut a.noise_sigma)?;

        let s = &mut c.synth;
        if let Some(v) = f.take("synth.shape") {
            s.spec.shape = parse_triple(&v).map_err(|r| PipelineError::value("synth.shape", r))?;
        }
        f.set("synth.num_modalities", &mut s.spec.num_modalities)?;
        f.set("synth.num_labels", &mut s.spec.num_labels)?;
        f.set("synth.noise_sigma", &mut s.spec.noise_sigma)?;
        f.set("synth.complementarity", &mut s.spec.complementarity)?;
        f.set("synth.num_cases", &mut s.num_cases)?;
        f.set("synth.base_seed", &mut s.base_seed)?;

        f.path("predict.checkpoint", &mut c.predict.checkpoint)?;
        f.path("predict.manifest", &mut c.predict.manifest)?;

        if let Some(v) = f.take("eval.regions") {
            c.eval.regions = parse_regions(&v).map_err(|r| PipelineError::value("eval.regions", r))?;
        }
        f.path("eval.pred_dir", &mut c.eval.pred_dir)?;
        f.path("eval.gt_manifest", &mut c.eval.gt_manifest)?;

        f.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let frac = |key: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(PipelineError::value(key, format!("must lie in (0, 1), got {v}")))
            }
        };
        frac("data.val_fraction", self.data.val_fraction)?;
        frac("data.holdout_fraction", self.data.holdout_fraction)?;
        let positive = |key: &str, v: usize| {
            if v >= 1 {
                Ok(())
            } else {
                Err(PipelineError::value(key, "must be at least 1"))
            }
        };
        positive("train.batch_size", self.train.batch_size)?;
        positive("train.epochs", self.train.epochs)?;
        positive("train.val_every", self.train.val_every)?;
        positive("pretrain.batch_size", self.pretrain.batch_size)?;
        positive("pretrain.epochs", self.pretrain.epochs)?;
        if self.train.steps_per_epoch == Some(0) {
            return Err(PipelineError::value("train.steps_per_epoch", "must be at least 1"));
        }
        if self.pretrain.steps_per_epoch == Some(0) {
            return Err(PipelineError::value("pretrain.steps_per_epoch", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.train.foreground_fraction) {
            return Err(PipelineError::value("train.foreground_fraction", "must lie in [0, 1]"));
        }
        self.train.patch.check_divisible(self.model.num_levels)?;
        self.pretrain.patch.check_divisible(self.model.num_levels)?;
        self.train.weights.validate()?;
        self.train.optim.schedule_spec(self.train.epochs).validate()?;
        self.pretrain.optim.schedule_spec(self.pretrain.epochs).validate()?;
        self.pretrain.ssl.validate(self.pretrain.patch.size)?;
        if self.pretrain.task_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(PipelineError::value("ssl.weight_*", "task weights must be non-negative"));
        }
        if let EncoderTransfer::Replicate { source } = self.train.init_mode {
            if source >= self.model.num_encoders() {
                return Err(PipelineError::value("train.init_mode", format!("no encoder {source}")));
            }
        }
        if self.eval.regions.is_empty() {
            return Err(PipelineError::value("eval.regions", "at least one region is required"));
        }
        for r in &self.eval.regions {
            if let Some(&l) = r.labels.iter().find(|&&l| l as usize >= self.model.num_labels) {
                return Err(PipelineError::value(
                    "eval.regions",
                    format!("region `{}` uses label {l} but the model has {} labels", r.name, self.model.num_labels),
                ));
            }
        }
        self.synth.spec.validate()?;
        if self.synth.num_cases == 0 {
            return Err(PipelineError::value("synth.num_cases", "must be at least 1"));
        }
        Ok(())
    }
}

fn parse_init_mode(v: &str) -> Result<EncoderTransfer, String> {
    if v == "per_modality" {
        return Ok(EncoderTransfer::PerModality);
    }
    if let Some(rest) = v.strip_prefix("replicate") {
        let source = match rest.strip_prefix(':') {
            Some(n) => n.parse().map_err(|_| format!("bad encoder index in `{v}`"))?,
            None if rest.is_empty() => 0,
            None => return Err(format!("unknown init mode `{v}`")),
        };
        return Ok(EncoderTransfer::Replicate { source });
    }
    Err(format!("unknown init mode `{v}` (per_modality | replicate[:N])"))
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',')
        .map(|s| s.trim().parse().map_err(|_| format!("bad list item `{}`", s.trim())))
        .collect()
}

/// `n` or `d,h,w`.
fn parse_triple(v: &str) -> Result<[usize; 3], String> {
    let items: Vec<usize> = parse_list(v)?;
    match items.as_slice() {
        [n] => Ok([*n; 3]),
        [d, h, w] => Ok([*d, *h, *w]),
        _ => Err(format!("expected 1 or 3 extents, got `{v}`")),
    }
}

/// `name:l1,l2;name:l3`
fn parse_regions(v: &str) -> Result<Vec<Region>, String> {
    v.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let (name, labels) = s.split_once(':').ok_or_else(|| format!("region `{s}` lacks `name:`"))?;
            let labels: Vec<u16> = parse_list(labels)?;
            Ok(Region::new(name.trim(), &labels))
        })
        .collect()
}

struct Fields {
    values: BTreeMap<String, String>,
    base: PathBuf,
}

impl Fields {
    fn read(text: &str, base: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let syntax = |reason: &str| PipelineError::ConfigSyntax {
                line: i + 1,
                reason: reason.to_string(),
            };
            let (k, v) = line.split_once('=').ok_or_else(|| syntax("expected `section.key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            if !k.contains('.') || k.split('.').any(str::is_empty) {
                return Err(syntax("key must be `section.key`"));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(syntax(&format!("duplicate key `{k}`")));
            }
        }
        Ok(Fields {
            values,
            base: base.to_path_buf(),
        })
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key) {
            *slot = v.parse().map_err(|_| PipelineError::value(key, format!("cannot parse `{v}`")))?;
        }
        Ok(())
    }

    fn optional<T: FromStr>(&mut self, key: &str, slot: &mut Option<T>) -> Result<()> {
        if let Some(v) = self.take(key) {
            *slot = Some(v.parse().map_err(|_| PipelineError::value(key, format!("cannot parse `{v}`")))?);
        }
        Ok(())
    }

    fn parsed<T>(&mut self, key: &str, slot: &mut T, parse: fn(&str) -> modfuse_core::Result<T>) -> Result<()> {
        if let Some(v) = self.take(key) {
            *slot = parse(&v).map_err(|e| PipelineError::value(key, e.to_string()))?;
        }
        Ok(())
    }

    fn path(&mut self, key: &str, slot: &mut PathBuf) -> Result<()> {
        if let Some(v) = self.take(key) {
            *slot = self.resolve(&v);
        }
        Ok(())
    }

    fn patch(&mut self, key: &str, slot: &mut PatchSpec) -> Result<()> {
        if let Some(v) = self.take(key) {
            let size = parse_triple(&v).map_err(|r| PipelineError::value(key, r))?;
            *slot = PatchSpec::new(size).map_err(|e| PipelineError::value(key, e.to_string()))?;
        }
        Ok(())
    }

    fn optim(&mut self, section: &str, o: &mut OptimConfig) -> Result<()> {
        self.set(&format!("{section}.optimizer"), &mut o.kind)?;
        self.set(&format!("{section}.lr"), &mut o.lr)?;
        self.set(&format!("{section}.momentum"), &mut o.momentum)?;
        self.set(&format!("{section}.weight_decay"), &mut o.weight_decay)?;
        self.parsed(&format!("{section}.schedule"), &mut o.schedule, ScheduleKind::from_str)?;
        self.set(&format!("{section}.eta_min"), &mut o.eta_min)?;
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.values.into_keys().next() {
            Some(k) => Err(PipelineError::UnknownKey(k)),
            None => Ok(()),
        }
    }
}
