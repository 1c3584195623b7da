//! Supervised training with validation and resumable checkpoints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use modfuse_core::checkpoint::Checkpoint;
use modfuse_core::losses::{combined_loss, soft_dice_loss};
use modfuse_core::metrics::{evaluate_all, Metric};
use modfuse_core::model::{LoadMode, Model};
use modfuse_core::nn::{softmax_channels_backward, softmax_channels_forward, ParamStore};
use modfuse_core::optim::{AdamWState, Optimizer, ScheduleSpec, SgdState};
use modfuse_core::rng::{derive, RngState, SeededRng};
use modfuse_core::volume::{augment, foreground_crop, one_hot, random_crop};
use modfuse_core::{par, Error, Tensor};

use crate::config::{Config, LossKind, OptimConfig, OptimizerKind};
use crate::data::{load_cases, split_indices, Case};
use crate::error::{PipelineError, Result};
use crate::predict::{argmax_labels, sliding_window_probs};

/// Seed streams derived from `run.seed`.
pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_SPLIT: u64 = 1;
pub(crate) const STREAM_SAMPLING: u64 = 2;
pub(crate) const STREAM_EVAL: u64 = 3;

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const STEP_TRACE: &str = "train_steps.csv";
pub const EPOCH_TRACE: &str = "train_epochs.csv";

/// Progress of a supervised run; everything needed to resume it.
#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    /// Completed epochs.
    pub epoch: usize,
    pub steps_per_epoch: usize,
    /// Loss of every optimizer step so far, in order.
    pub step_losses: Vec<f64>,
    /// Mean step loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean validation DSC for the epochs at which validation ran.
    pub val_dsc: Vec<Option<f64>>,
    /// `(epoch, dsc)` of the best validation so far; its weights are in
    /// `best.ckpt`.
    pub best: Option<(usize, f64)>,
}

pub(crate) fn build_optimizer(o: &OptimConfig, params: &ParamStore) -> Result<Optimizer> {
    Ok(match o.kind {
        OptimizerKind::Sgd => Optimizer::Sgd(SgdState::new(params, o.momentum, o.weight_decay)?),
        OptimizerKind::AdamW => Optimizer::AdamW(AdamWState::new(params, o.weight_decay)),
    })
}

pub(crate) fn join_f64(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn split_f64(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|v| v.parse().map_err(|_| Error::BadCheckpoint(format!("bad trace value `{v}`")).into()))
        .collect()
}

pub(crate) fn meta<'a>(ck: &'a Checkpoint, key: &str) -> Result<&'a str> {
    Ok(ck
        .meta(key)
        .ok_or_else(|| Error::BadCheckpoint(format!("missing `{key}`")))?)
}

pub(crate) fn meta_num<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    meta(ck, key)?
        .parse()
        .map_err(|_| Error::BadCheckpoint(format!("bad `{key}`")).into())
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Refuses to resume a run whose seed differs from the config.
pub(crate) fn check_seed(ck: &Checkpoint, cfg: &Config) -> Result<()> {
    let seed: u64 = meta_num(ck, "run.seed")?;
    if seed != cfg.seed {
        return Err(PipelineError::value(
            "run.seed",
            format!("checkpoint was written with seed {seed}, config has {}", cfg.seed),
        ));
    }
    Ok(())
}

/// One training example: per-modality inputs and a one-hot target.
struct Sample {
    inputs: Vec<Tensor>,
    target: Tensor,
}

/// Loss value and its gradient with respect to the logits.
fn loss_and_grad(kind: LossKind, cfg: &Config, logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    Ok(match kind {
        LossKind::Combined => combined_loss(logits, target, cfg.train.weights)?,
        LossKind::SoftDice => {
            let probs = softmax_channels_forward(logits);
            let (l, g) = soft_dice_loss(&probs, target)?;
            (l, softmax_channels_backward(&probs, &g)?)
        }
    })
}

/// Mean validation DSC over cases, each case averaged over the configured
/// regions.
pub fn validation_dsc(model: &Model, cases: &[Case], cfg: &Config) -> Result<f64> {
    let mut triples = Vec::with_capacity(cases.len());
    for c in cases {
        let probs = sliding_window_probs(model, c.volume.modalities(), cfg.train.patch)?;
        let gt = c.volume.mask().expect("validation cases carry masks").clone();
        triples.push((c.id.clone(), argmax_labels(&probs), gt));
    }
    Ok(evaluate_all(&triples, &cfg.eval.regions)?.aggregate(Metric::Dsc).0)
}

pub struct Trainer {
    cfg: Config,
    model: Model,
    optimizer: Optimizer,
    schedule: ScheduleSpec,
    train: Vec<Case>,
    val: Vec<Case>,
    rng: SeededRng,
    state: RunState,
}

impl Trainer {
    /// Loads the data, builds the model (optionally from an encoder
    /// checkpoint) and prepares epoch 0. Nothing is written yet.
    pub fn new(cfg: &Config) -> Result<Self> {
        let (train, val) = load_split(cfg)?;
        let mut init_rng = derive(cfg.seed, STREAM_INIT);
        let model = match &cfg.train.init {
            None => Model::build(&cfg.model, &mut init_rng)?,
            Some(path) => {
                let ck = Checkpoint::load(path)?;
                let mode = LoadMode::EncodersOnly(cfg.train.init_mode);
                Model::from_checkpoint(&ck, &cfg.model, mode, &mut init_rng).map_err(|e| match e {
                    e @ (Error::ConfigMismatch { .. } | Error::MissingParam(_) | Error::ShapeMismatch { .. }) => {
                        PipelineError::IncompatibleInit(e)
                    }
                    other => other.into(),
                })?
            }
        };
        let optimizer = build_optimizer(&cfg.train.optim, model.params())?;
        let steps_per_epoch = cfg.train.steps_per_epoch.unwrap_or(train.len().div_ceil(cfg.train.batch_size));
        Ok(Trainer {
            schedule: cfg.train.optim.schedule_spec(cfg.train.epochs),
            cfg: cfg.clone(),
            model,
            optimizer,
            train,
            val,
            rng: derive(cfg.seed, STREAM_SAMPLING),
            state: RunState {
                epoch: 0,
                steps_per_epoch,
                step_losses: Vec::new(),
                epoch_losses: Vec::new(),
                val_dsc: Vec::new(),
                best: None,
            },
        })
    }

    /// Continues the run stored in `output_dir/last.ckpt`.
    pub fn resume(cfg: &Config) -> Result<Self> {
        let ck = Checkpoint::load(&cfg.output_dir.join(LAST_CHECKPOINT))?;
        check_seed(&ck, cfg)?;
        let (train, val) = load_split(cfg)?;
        let model = Model::from_checkpoint(&ck, &cfg.model, LoadMode::Full, &mut derive(cfg.seed, STREAM_INIT))?;
        let optimizer = Optimizer::read_from(&ck, model.params())?
            .ok_or_else(|| Error::BadCheckpoint("no optimizer state".into()))?;
        let val_dsc = meta(&ck, "run.val_dsc")?;
        let val_dsc = if val_dsc.is_empty() {
            Vec::new()
        } else {
            val_dsc
                .split(',')
                .map(|v| match v {
                    "-" => Ok(None),
                    v => v.parse().map(Some).map_err(|_| Error::BadCheckpoint(format!("bad dsc `{v}`")).into()),
                })
                .collect::<Result<_>>()?
        };
        let best = match ck.meta("run.best_epoch") {
            Some(_) => Some((meta_num(&ck, "run.best_epoch")?, meta_num(&ck, "run.best_dsc")?)),
            None => None,
        };
        let state = RunState {
            epoch: meta_num(&ck, "run.epoch")?,
            steps_per_epoch: meta_num(&ck, "run.steps_per_epoch")?,
            step_losses: split_f64(meta(&ck, "run.step_losses")?)?,
            epoch_losses: split_f64(meta(&ck, "run.epoch_losses")?)?,
            val_dsc,
            best,
        };
        Ok(Trainer {
            schedule: cfg.train.optim.schedule_spec(cfg.train.epochs),
            cfg: cfg.clone(),
            model,
            optimizer,
            train,
            val,
            rng: RngState::decode(meta(&ck, "run.rng")?)?.restore(),
            state,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn train_ids(&self) -> Vec<&str> {
        self.train.iter().map(|c| c.id.as_str()).collect()
    }

    pub fn val_ids(&self) -> Vec<&str> {
        self.val.iter().map(|c| c.id.as_str()).collect()
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.train.epochs
    }

    fn draw(&mut self, case: usize) -> Result<Sample> {
        let t = &self.cfg.train;
        let v = &self.train[case].volume;
        let crop = if self.rng.random_bool(t.foreground_fraction) {
            foreground_crop(v, t.patch, &mut self.rng)?
        } else {
            random_crop(v, t.patch, &mut self.rng)?
        };
        let crop = augment(&crop, &self.cfg.augment, &mut self.rng);
        let mask = crop.mask().expect("training cases carry masks");
        Ok(Sample {
            target: one_hot(mask, self.cfg.model.num_labels)?,
            inputs: crop.modalities().to_vec(),
        })
    }

    /// Forward and backward over a batch in parallel; returns the mean loss
    /// and the batch-mean gradient, both reduced in sample order.
    fn batch_gradient(&self, batch: &[Sample]) -> Result<(f64, Vec<Tensor>)> {
        let model = &self.model;
        let kind = self.cfg.train.loss;
        let results = par::map(batch.len(), |i| -> Result<(f64, Vec<Tensor>)> {
            let (logits, trace) = model.forward_traced(&batch[i].inputs)?;
            let (loss, g) = loss_and_grad(kind, &self.cfg, &logits, &batch[i].target)?;
            let mut grads = model.params().grad_buffers();
            model.gradients(&trace, &g, &mut grads)?;
            Ok((loss, grads))
        });
        let inv = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut total: Option<Vec<Tensor>> = None;
        for r in results {
            let (l, grads) = r?;
            loss += l;
            match &mut total {
                None => total = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
            }
        }
        let mut total = total.expect("non-empty batch");
        total.iter_mut().for_each(|g| g.scale(inv));
        Ok((loss * inv, total))
    }

    /// Trains one epoch, validates when due and writes checkpoints and
    /// traces. Returns the epoch's training loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let epoch = self.state.epoch;
        let lr = self.schedule.lr(epoch)?;
        let b = self.cfg.train.batch_size;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = 0.0;
        for step in 0..self.state.steps_per_epoch {
            let batch = (0..b)
                .map(|i| self.draw(order[(step * b + i) % order.len()]))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grads) = self.batch_gradient(&batch)?;
            let store = self.model.params_mut();
            store.zero_grads();
            store.accumulate(&grads);
            self.optimizer.step(store, lr);
            self.state.step_losses.push(loss);
            sum += loss;
        }
        let epoch_loss = sum / self.state.steps_per_epoch as f64;
        self.state.epoch_losses.push(epoch_loss);
        self.state.epoch += 1;

        let due = self.state.epoch % self.cfg.train.val_every == 0 || self.state.epoch == self.cfg.train.epochs;
        let dsc = if due {
            Some(validation_dsc(&self.model, &self.val, &self.cfg)?)
        } else {
            None
        };
        self.state.val_dsc.push(dsc);
        ensure_dir(&self.cfg.output_dir)?;
        if let Some(d) = dsc {
            if self.state.best.is_none_or(|(_, best)| d > best) {
                self.state.best = Some((epoch, d));
                let mut ck = self.model.to_checkpoint();
                ck.set_meta("run.best_epoch", epoch.to_string());
                ck.set_meta("run.best_dsc", d.to_string());
                ck.save(&self.cfg.output_dir.join(BEST_CHECKPOINT))?;
            }
        }
        self.save_last()?;
        self.write_traces()?;
        log::info!(
            "epoch {}/{}: lr {lr:.3e} loss {epoch_loss:.5}{}",
            self.state.epoch,
            self.cfg.train.epochs,
            dsc.map(|d| format!(" val dsc {d:.4}")).unwrap_or_default()
        );
        Ok(epoch_loss)
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> Result<&RunState> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(&self.state)
    }

    fn save_last(&self) -> Result<()> {
        let s = &self.state;
        let mut ck = self.model.to_checkpoint();
        self.optimizer.write_to(&mut ck, self.model.params());
        ck.set_meta("run.seed", self.cfg.seed.to_string());
        ck.set_meta("run.epoch", s.epoch.to_string());
        ck.set_meta("run.steps_per_epoch", s.steps_per_epoch.to_string());
        ck.set_meta("run.rng", RngState::capture(&self.rng).encode());
        ck.set_meta("run.step_losses", join_f64(&s.step_losses));
        ck.set_meta("run.epoch_losses", join_f64(&s.epoch_losses));
        let val: Vec<String> = s
            .val_dsc
            .iter()
            .map(|v| v.map_or_else(|| "-".to_string(), |d| d.to_string()))
            .collect();
        ck.set_meta("run.val_dsc", val.join(","));
        if let Some((e, d)) = s.best {
            ck.set_meta("run.best_epoch", e.to_string());
            ck.set_meta("run.best_dsc", d.to_string());
            ck.set_meta("run.best_path", BEST_CHECKPOINT);
        }
        ck.save(&self.cfg.output_dir.join(LAST_CHECKPOINT))?;
        Ok(())
    }

    fn write_traces(&self) -> Result<()> {
        let s = &self.state;
        let mut steps = String::from("epoch,step,loss\n");
        for (i, l) in s.step_losses.iter().enumerate() {
            let _ = writeln!(steps, "{},{},{l}", i / s.steps_per_epoch, i % s.steps_per_epoch);
        }
        write_text(&self.cfg.output_dir.join(STEP_TRACE), &steps)?;
        let mut epochs = String::from("epoch,loss,val_dsc\n");
        for (e, (l, v)) in s.epoch_losses.iter().zip(&s.val_dsc).enumerate() {
            let v = v.map(|d| d.to_string()).unwrap_or_default();
            let _ = writeln!(epochs, "{e},{l},{v}");
        }
        write_text(&self.cfg.output_dir.join(EPOCH_TRACE), &epochs)
    }
}

/// Loads the labelled manifest and splits it into training and validation
/// cases. The two id sets are disjoint by construction and checked.
fn load_split(cfg: &Config) -> Result<(Vec<Case>, Vec<Case>)> {
    let cases = load_cases(&cfg.data.train_manifest, cfg.model.num_modalities, Some(cfg.model.num_labels))?;
    let (tr, va) = split_indices(cases.len(), cfg.data.val_fraction, &mut derive(cfg.seed, STREAM_SPLIT))?;
    let train: Vec<Case> = tr.iter().map(|&i| cases[i].clone()).collect();
    let val: Vec<Case> = va.iter().map(|&i| cases[i].clone()).collect();
    assert!(
        train.iter().all(|t| val.iter().all(|v| v.id != t.id)),
        "validation cases leaked into training"
    );
    Ok((train, val))
}

/// Result of a finished supervised run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: RunState,
    pub last: PathBuf,
    pub best: PathBuf,
}

/// Trains from scratch (or from `train.init`), or continues the previous run
/// in `output_dir` when `resume` is set.
pub fn cmd_train(cfg: &Config, resume: bool) -> Result<TrainOutcome> {
    let mut trainer = if resume { Trainer::resume(cfg)? } else { Trainer::new(cfg)? };
    log::info!(
        "training on {} cases, validating on {}, {} steps per epoch",
        trainer.train.len(),
        trainer.val.len(),
        trainer.state.steps_per_epoch
    );
    let state = trainer.run()?.clone();
    Ok(TrainOutcome {
        state,
        last: cfg.output_dir.join(LAST_CHECKPOINT),
        best: cfg.output_dir.join(BEST_CHECKPOINT),
    })
}
