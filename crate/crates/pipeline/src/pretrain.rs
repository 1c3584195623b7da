//! Self-supervised pretraining of the encoders on unlabelled cases.

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;

use modfuse_core::checkpoint::Checkpoint;
use modfuse_core::losses::{contrastive_loss, inpainting_loss, rotation_loss};
use modfuse_core::model::{Model, ModelConfig};
use modfuse_core::optim::{Optimizer, ScheduleSpec};
use modfuse_core::rng::{derive, RngState, SeededRng};
use modfuse_core::ssl::{apply_mask, inpainting_mask, make_sample, quarter_turns, SslHeads, SslSample};
use modfuse_core::volume::{random_crop, rotate_axial};
use modfuse_core::{par, Error, Tensor};

use crate::config::Config;
use crate::data::{load_cases, split_indices, Case};
use crate::error::Result;
use crate::train::{
    build_optimizer, check_seed, ensure_dir, join_f64, meta, meta_num, split_f64, write_text, STREAM_EVAL,
    STREAM_INIT, STREAM_SAMPLING, STREAM_SPLIT,
};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const PRETRAIN_TRACE: &str = "pretrain_trace.csv";

/// Per-epoch means of the total and per-task losses, plus the held-out
/// rotation accuracy measured after the epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainTrace {
    pub loss: Vec<f64>,
    pub inpainting: Vec<f64>,
    pub rotation: Vec<f64>,
    pub contrastive: Vec<f64>,
    pub rotation_accuracy: Vec<f64>,
}

impl PretrainTrace {
    pub fn epochs(&self) -> usize {
        self.loss.len()
    }

    fn columns(&self) -> [(&'static str, &Vec<f64>); 5] {
        [
            ("loss", &self.loss),
            ("inpainting", &self.inpainting),
            ("rotation", &self.rotation),
            ("contrastive", &self.contrastive),
            ("rotation_accuracy", &self.rotation_accuracy),
        ]
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct StepLosses {
    total: f64,
    inpainting: f64,
    rotation: f64,
    contrastive: f64,
}

pub struct Pretrainer {
    cfg: Config,
    model: Model,
    heads: SslHeads,
    optimizer: Optimizer,
    schedule: ScheduleSpec,
    train: Vec<Case>,
    holdout: Vec<Case>,
    rng: SeededRng,
    steps_per_epoch: usize,
    trace: PretrainTrace,
}

fn load_split(cfg: &Config) -> Result<(Vec<Case>, Vec<Case>)> {
    let cases = load_cases(&cfg.data.pretrain_manifest, cfg.model.num_modalities, None)?;
    let (tr, ho) = split_indices(cases.len(), cfg.data.holdout_fraction, &mut derive(cfg.seed, STREAM_SPLIT))?;
    Ok((
        tr.iter().map(|&i| cases[i].clone()).collect(),
        ho.iter().map(|&i| cases[i].clone()).collect(),
    ))
}

impl Pretrainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        if cfg.pretrain.batch_size < 2 && cfg.pretrain.task_weights[2] > 0.0 {
            return Err(crate::error::PipelineError::value(
                "pretrain.batch_size",
                "contrastive coding needs at least 2 cases per batch",
            ));
        }
        let (train, holdout) = load_split(cfg)?;
        let mut rng = derive(cfg.seed, STREAM_INIT);
        let mut model = Model::build(&cfg.model, &mut rng)?;
        let heads = SslHeads::attach(&mut model, &cfg.pretrain.ssl, &mut rng);
        let optimizer = build_optimizer(&cfg.pretrain.optim, model.params())?;
        let steps_per_epoch = cfg
            .pretrain
            .steps_per_epoch
            .unwrap_or(train.len().div_ceil(cfg.pretrain.batch_size));
        Ok(Pretrainer {
            schedule: cfg.pretrain.optim.schedule_spec(cfg.pretrain.epochs),
            cfg: cfg.clone(),
            model,
            heads,
            optimizer,
            train,
            holdout,
            rng: derive(cfg.seed, STREAM_SAMPLING),
            steps_per_epoch,
            trace: PretrainTrace::default(),
        })
    }

    /// Continues from `output_dir/pretrain.ckpt`.
    pub fn resume(cfg: &Config) -> Result<Self> {
        let ck = Checkpoint::load(&cfg.output_dir.join(PRETRAIN_CHECKPOINT))?;
        check_seed(&ck, cfg)?;
        let mut fresh = Pretrainer::new(cfg)?;
        let found = ModelConfig::from_checkpoint(&ck)?;
        if found != cfg.model {
            return Err(Error::ConfigMismatch {
                key: "model".into(),
                found: format!("{found:?}"),
                expected: format!("{:?}", cfg.model),
            }
            .into());
        }
        let ids: Vec<String> = fresh.model.params().params().iter().map(|p| p.id.clone()).collect();
        for id in ids {
            let t = ck.tensor(&id).ok_or_else(|| Error::MissingParam(id.clone()))?;
            fresh.model.params_mut().set_value(&id, t.clone())?;
        }
        fresh.optimizer = Optimizer::read_from(&ck, fresh.model.params())?
            .ok_or_else(|| Error::BadCheckpoint("no optimizer state".into()))?;
        fresh.rng = RngState::decode(meta(&ck, "run.rng")?)?.restore();
        fresh.steps_per_epoch = meta_num(&ck, "run.steps_per_epoch")?;
        let mut trace = PretrainTrace::default();
        trace.loss = split_f64(meta(&ck, "run.trace.loss")?)?;
        trace.inpainting = split_f64(meta(&ck, "run.trace.inpainting")?)?;
        trace.rotation = split_f64(meta(&ck, "run.trace.rotation")?)?;
        trace.contrastive = split_f64(meta(&ck, "run.trace.contrastive")?)?;
        trace.rotation_accuracy = split_f64(meta(&ck, "run.trace.rotation_accuracy")?)?;
        fresh.trace = trace;
        Ok(fresh)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn trace(&self) -> &PretrainTrace {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.trace.epochs() >= self.cfg.pretrain.epochs
    }

    fn step(&mut self, batch: &[SslSample], lr: f64) -> Result<StepLosses> {
        let w = self.cfg.pretrain.task_weights;
        let b = batch.len();
        let views: Vec<(usize, usize)> = (0..2).flat_map(|v| (0..b).map(move |i| (i, v))).collect();
        let (model, heads) = (&self.model, &self.heads);
        let outs = par::map(views.len(), |k| {
            let (i, v) = views[k];
            heads.forward(model, &batch[i].views[v].input)
        })
        .into_iter()
        .collect::<modfuse_core::Result<Vec<_>>>()?;

        let n = views.len() as f64;
        let mut losses = StepLosses::default();
        let mut grad_recon = Vec::with_capacity(views.len());
        let mut grad_rot = Vec::with_capacity(views.len());
        for (k, &(i, v)) in views.iter().enumerate() {
            let view = &batch[i].views[v];
            let (li, mut gi) = inpainting_loss(&outs[k].recon, &view.target, &view.mask)?;
            let (lr_, mut gr) = rotation_loss(&outs[k].rotation_logits, batch[i].rotation)?;
            losses.inpainting += li / n;
            losses.rotation += lr_ / n;
            gi.scale(w[0] / n);
            gr.scale(w[1] / n);
            grad_recon.push(gi);
            grad_rot.push(gr);
        }
        let za: Vec<Tensor> = outs[..b].iter().map(|o| o.embedding.clone()).collect();
        let zb: Vec<Tensor> = outs[b..].iter().map(|o| o.embedding.clone()).collect();
        let grad_emb: Vec<Tensor> = if w[2] > 0.0 {
            let (lc, ga, gb) = contrastive_loss(&za, &zb, self.cfg.pretrain.ssl.temperature)?;
            losses.contrastive = lc;
            ga.into_iter()
                .chain(gb)
                .map(|mut g| {
                    g.scale(w[2]);
                    g
                })
                .collect()
        } else {
            outs.iter().map(|o| Tensor::zeros_like(&o.embedding)).collect()
        };
        losses.total = w[0] * losses.inpainting + w[1] * losses.rotation + w[2] * losses.contrastive;

        let grads = par::map(views.len(), |k| -> Result<Vec<Tensor>> {
            let mut g = model.params().grad_buffers();
            heads.backward(model, &outs[k], &grad_recon[k], &grad_rot[k], &grad_emb[k], &mut g)?;
            Ok(g)
        });
        let mut total: Option<Vec<Tensor>> = None;
        for g in grads {
            let g = g?;
            match &mut total {
                None => total = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| a.add_assign(x)),
            }
        }
        let store = self.model.params_mut();
        store.zero_grads();
        store.accumulate(&total.expect("non-empty batch"));
        self.optimizer.step(store, lr);
        Ok(losses)
    }

    /// Rotation accuracy on the held-out cases: every case contributes one
    /// fixed masked crop per rotation class. The crops and masks come from a
    /// dedicated stream that is re-seeded for every evaluation.
    pub fn rotation_accuracy(&self) -> Result<f64> {
        let ssl = &self.cfg.pretrain.ssl;
        let k = ssl.num_rotations;
        let mut rng = derive(self.cfg.seed, STREAM_EVAL);
        let mut inputs = Vec::with_capacity(self.holdout.len() * k);
        for case in &self.holdout {
            let crop = random_crop(&case.volume, self.cfg.pretrain.patch, &mut rng)?;
            for class in 0..k {
                let rotated = rotate_axial(&crop, quarter_turns(class, k));
                let mask = inpainting_mask(rotated.shape(), ssl, &mut rng);
                inputs.push((apply_mask(rotated.modalities(), &mask), class));
            }
        }
        let (model, heads) = (&self.model, &self.heads);
        let hits = par::map(inputs.len(), |i| -> Result<bool> {
            let out = heads.forward(model, &inputs[i].0)?;
            let logits = out.rotation_logits.data();
            let best = (1..logits.len()).fold(0, |b, c| if logits[c] > logits[b] { c } else { b });
            Ok(best == inputs[i].1)
        });
        let mut correct = 0usize;
        for h in hits {
            correct += usize::from(h?);
        }
        Ok(correct as f64 / inputs.len() as f64)
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let epoch = self.trace.epochs();
        let lr = self.schedule.lr(epoch)?;
        let p = self.cfg.pretrain.clone();
        let b = p.batch_size;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = StepLosses::default();
        for step in 0..self.steps_per_epoch {
            let batch = (0..b)
                .map(|i| {
                    let case = &self.train[order[(step * b + i) % order.len()]];
                    make_sample(&case.volume, p.patch, &p.ssl, &self.cfg.augment, &mut self.rng)
                })
                .collect::<modfuse_core::Result<Vec<_>>>()?;
            let l = self.step(&batch, lr)?;
            sum.total += l.total;
            sum.inpainting += l.inpainting;
            sum.rotation += l.rotation;
            sum.contrastive += l.contrastive;
        }
        let s = self.steps_per_epoch as f64;
        self.trace.loss.push(sum.total / s);
        self.trace.inpainting.push(sum.inpainting / s);
        self.trace.rotation.push(sum.rotation / s);
        self.trace.contrastive.push(sum.contrastive / s);
        let acc = self.rotation_accuracy()?;
        self.trace.rotation_accuracy.push(acc);
        log::info!(
            "pretrain epoch {}/{}: loss {:.5} (inpaint {:.5}, rot {:.5}, contrast {:.5}) held-out rot acc {acc:.3}",
            epoch + 1,
            p.epochs,
            sum.total / s,
            sum.inpainting / s,
            sum.rotation / s,
            sum.contrastive / s
        );
        self.save()
    }

    pub fn run(&mut self) -> Result<&PretrainTrace> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(&self.trace)
    }

    fn save(&self) -> Result<()> {
        let dir = &self.cfg.output_dir;
        ensure_dir(dir)?;
        let mut ck = self.model.to_checkpoint();
        self.optimizer.write_to(&mut ck, self.model.params());
        ck.set_meta("run.seed", self.cfg.seed.to_string());
        ck.set_meta("run.epoch", self.trace.epochs().to_string());
        ck.set_meta("run.steps_per_epoch", self.steps_per_epoch.to_string());
        ck.set_meta("run.rng", RngState::capture(&self.rng).encode());
        for (name, col) in self.trace.columns() {
            ck.set_meta(&format!("run.trace.{name}"), join_f64(col));
        }
        ck.save(&dir.join(PRETRAIN_CHECKPOINT))?;

        let cols = self.trace.columns();
        let mut csv = String::from("epoch");
        for (name, _) in &cols {
            let _ = write!(csv, ",{name}");
        }
        csv.push('\n');
        for e in 0..self.trace.epochs() {
            let _ = write!(csv, "{e}");
            for (_, col) in &cols {
                let _ = write!(csv, ",{}", col[e]);
            }
            csv.push('\n');
        }
        write_text(&dir.join(PRETRAIN_TRACE), &csv)
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub trace: PretrainTrace,
    pub checkpoint: PathBuf,
}

pub fn cmd_pretrain(cfg: &Config, resume: bool) -> Result<PretrainOutcome> {
    let mut p = if resume { Pretrainer::resume(cfg)? } else { Pretrainer::new(cfg)? };
    log::info!(
        "pretraining on {} cases, {} held out, {} steps per epoch",
        p.train.len(),
        p.holdout.len(),
        p.steps_per_epoch
    );
    let trace = p.run()?.clone();
    Ok(PretrainOutcome {
        trace,
        checkpoint: cfg.output_dir.join(PRETRAIN_CHECKPOINT),
    })
}
