//! Parameter update rules and per-epoch learning-rate schedules.

use std::f64::consts::PI;
use std::str::FromStr;

use crate::checkpoint::Checkpoint;
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Poly,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poly" => Ok(ScheduleKind::Poly),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::ConfigInvalid(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub eta0: f64,
    pub total_epochs: usize,
    pub power: f64,
    pub eta_min: f64,
}

impl ScheduleSpec {
    pub fn poly(eta0: f64, total_epochs: usize) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Poly,
            eta0,
            total_epochs,
            power: 0.9,
            eta_min: 0.0,
        }
    }

    pub fn cosine(eta0: f64, total_epochs: usize, eta_min: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Cosine,
            eta0,
            total_epochs,
            power: 0.9,
            eta_min,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs < 1 {
            return Err(Error::ConfigInvalid("schedule needs at least one epoch".into()));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::ConfigInvalid(format!("initial learning rate must be positive, got {}", self.eta0)));
        }
        Ok(())
    }

    /// Learning rate for epoch `t` (0-based).
    pub fn lr(&self, t: usize) -> Result<f64> {
        match self.kind {
            ScheduleKind::Poly => poly_lr(t, self),
            ScheduleKind::Cosine => cosine_lr(t, self),
        }
    }

    fn check(&self, t: usize) -> Result<f64> {
        if t > self.total_epochs {
            return Err(Error::EpochOutOfRange {
                epoch: t,
                total: self.total_epochs,
            });
        }
        Ok(t as f64 / self.total_epochs as f64)
    }
}

/// `η0·(1 − t/T)^power`
pub fn poly_lr(t: usize, s: &ScheduleSpec) -> Result<f64> {
    let frac = s.check(t)?;
    Ok(s.eta0 * (1.0 - frac).powf(s.power))
}

/// `η_min + ½(η0 − η_min)(1 + cos(πt/T))`
pub fn cosine_lr(t: usize, s: &ScheduleSpec) -> Result<f64> {
    let frac = s.check(t)?;
    Ok(s.eta_min + 0.5 * (s.eta0 - s.eta_min) * (1.0 + (PI * frac).cos()))
}

/// SGD with heavy-ball momentum and coupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Tensor>,
}

impl SgdState {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::ConfigInvalid(format!("momentum must lie in [0,1), got {momentum}")));
        }
        Ok(SgdState {
            momentum,
            weight_decay,
            buffers: params.params().iter().map(|p| Tensor::zeros_like(&p.value)).collect(),
        })
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }
}

pub fn sgd_step(params: &mut ParamStore, state: &mut SgdState, lr: f64) {
    let (mu, wd) = (state.momentum, state.weight_decay);
    for (p, buf) in params.params_mut().iter_mut().zip(&mut state.buffers) {
        let value = p.value.data_mut();
        for ((v, &g), b) in value.iter_mut().zip(p.grad.data()).zip(buf.data_mut()) {
            let g = g + wd * *v;
            *b = mu * *b + g;
            *v -= lr * *b;
        }
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamWState {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || params.params().iter().map(|p| Tensor::zeros_like(&p.value)).collect();
        AdamWState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

pub fn adamw_step(params: &mut ParamStore, state: &mut AdamWState, lr: f64) {
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let shrink = 1.0 - lr * state.weight_decay;
    for ((p, m), v) in params.params_mut().iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let value = p.value.data_mut();
        for (((x, &g), m), v) in value.iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *x = *x * shrink - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// An optimizer of either kind, with checkpoint persistence.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Sgd(SgdState),
    AdamW(AdamWState),
}

impl Optimizer {
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        match self {
            Optimizer::Sgd(s) => sgd_step(params, s, lr),
            Optimizer::AdamW(s) => adamw_step(params, s, lr),
        }
    }

    /// Adds the optimizer state as `optim.*` metadata and tensors, keyed by
    /// parameter id.
    pub fn write_to(&self, ck: &mut Checkpoint, params: &ParamStore) {
        let ids = params.params().iter().map(|p| p.id.as_str());
        match self {
            Optimizer::Sgd(s) => {
                ck.set_meta("optim.kind", "sgd");
                ck.set_meta("optim.momentum", s.momentum.to_string());
                ck.set_meta("optim.weight_decay", s.weight_decay.to_string());
                for (id, b) in ids.zip(&s.buffers) {
                    ck.push_tensor(&format!("optim.buf.{id}"), b.clone());
                }
            }
            Optimizer::AdamW(s) => {
                ck.set_meta("optim.kind", "adamw");
                ck.set_meta("optim.beta1", s.beta1.to_string());
                ck.set_meta("optim.beta2", s.beta2.to_string());
                ck.set_meta("optim.eps", s.eps.to_string());
                ck.set_meta("optim.weight_decay", s.weight_decay.to_string());
                ck.set_meta("optim.step", s.step.to_string());
                for ((id, m), v) in ids.zip(&s.m).zip(&s.v) {
                    ck.push_tensor(&format!("optim.m.{id}"), m.clone());
                    ck.push_tensor(&format!("optim.v.{id}"), v.clone());
                }
            }
        }
    }

    /// Restores state written by [`Optimizer::write_to`]; `None` when the
    /// checkpoint carries no optimizer.
    pub fn read_from(ck: &Checkpoint, params: &ParamStore) -> Result<Option<Self>> {
        let Some(kind) = ck.meta("optim.kind") else {
            return Ok(None);
        };
        let num = |k: &str| -> Result<f64> {
            ck.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::BadCheckpoint(format!("missing or bad `{k}`")))
        };
        let tensors = |prefix: &str| -> Result<Vec<Tensor>> {
            params
                .params()
                .iter()
                .map(|p| {
                    let name = format!("{prefix}{}", p.id);
                    let t = ck.tensor(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
                    if t.shape() != p.value.shape() {
                        return Err(Error::shape(name, p.value.shape(), t.shape()));
                    }
                    Ok(t.clone())
                })
                .collect()
        };
        match kind {
            "sgd" => Ok(Some(Optimizer::Sgd(SgdState {
                momentum: num("optim.momentum")?,
                weight_decay: num("optim.weight_decay")?,
                buffers: tensors("optim.buf.")?,
            }))),
            "adamw" => Ok(Some(Optimizer::AdamW(AdamWState {
                beta1: num("optim.beta1")?,
                beta2: num("optim.beta2")?,
                eps: num("optim.eps")?,
                weight_decay: num("optim.weight_decay")?,
                step: ck
                    .meta("optim.step")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::BadCheckpoint("missing or bad `optim.step`".into()))?,
                m: tensors("optim.m.")?,
                v: tensors("optim.v.")?,
            }))),
            other => Err(Error::BadCheckpoint(format!("unknown optimizer `{other}`"))),
        }
    }
}
