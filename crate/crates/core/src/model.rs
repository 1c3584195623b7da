//! Multi-encoder U-Net and its single-encoder baseline.
//!
//! Topology (L levels, widths `c_l = min(base·2^l, 320)`):
//!
//! * encoder level 0: two conv blocks at full resolution; level `l ≥ 1`: a
//!   stride-2 conv block followed by a stride-1 conv block. A conv block is
//!   conv3d(3³) → instance norm → leaky ReLU.
//! * the multi-encoder variant runs one single-channel encoder per modality
//!   and fuses their level outputs (bottleneck and skips); the vanilla
//!   variant runs one encoder on all modalities stacked as channels.
//! * the shared decoder upsamples with a transposed conv, concatenates the
//!   fused skip of the same level, and applies two conv blocks.
//! * a 1×1×1 head emits `num_labels` logits.

use std::fmt;
use std::str::FromStr;

use crate::checkpoint::Checkpoint;
use crate::nn::{BlockCache, Conv, ConvBlock, ConvTranspose, ParamStore};
use crate::par;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAX_CHANNELS: usize = 320;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fusion {
    /// Channel concatenation followed by a learned 1×1×1 projection.
    ConcatProject,
    /// Element-wise mean.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    MultiEncoder,
    Vanilla,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::ConcatProject => "concat_project",
            Fusion::Mean => "mean",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat_project" => Ok(Fusion::ConcatProject),
            "mean" => Ok(Fusion::Mean),
            other => Err(Error::ConfigInvalid(format!("unknown fusion `{other}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::MultiEncoder => "multi_encoder",
            Variant::Vanilla => "vanilla",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi_encoder" => Ok(Variant::MultiEncoder),
            "vanilla" => Ok(Variant::Vanilla),
            other => Err(Error::ConfigInvalid(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_modalities: usize,
    pub num_labels: usize,
    pub num_levels: usize,
    pub base_channels: usize,
    pub fusion: Fusion,
    pub skip_fusion: Fusion,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_modalities: 2,
            num_labels: 3,
            num_levels: 3,
            base_channels: 8,
            fusion: Fusion::ConcatProject,
            skip_fusion: Fusion::Mean,
            variant: Variant::MultiEncoder,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.to_string()));
        if self.num_modalities < 1 {
            return bad("num_modalities must be >= 1");
        }
        if self.num_labels < 2 {
            return bad("num_labels must be >= 2");
        }
        if self.num_levels < 2 {
            return bad("num_levels must be >= 2");
        }
        if self.base_channels < 1 {
            return bad("base_channels must be >= 1");
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level).min(MAX_CHANNELS)
    }

    pub fn num_encoders(&self) -> usize {
        match self.variant {
            Variant::MultiEncoder => self.num_modalities,
            Variant::Vanilla => 1,
        }
    }

    pub fn encoder_in_channels(&self) -> usize {
        match self.variant {
            Variant::MultiEncoder => 1,
            Variant::Vanilla => self.num_modalities,
        }
    }

    /// Required divisor of every input extent.
    pub fn size_divisor(&self) -> usize {
        1 << (self.num_levels - 1)
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("model.num_modalities".into(), self.num_modalities.to_string()),
            ("model.num_labels".into(), self.num_labels.to_string()),
            ("model.num_levels".into(), self.num_levels.to_string()),
            ("model.base_channels".into(), self.base_channels.to_string()),
            ("model.fusion".into(), self.fusion.to_string()),
            ("model.skip_fusion".into(), self.skip_fusion.to_string()),
            ("model.variant".into(), self.variant.to_string()),
        ]
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ck.meta(k)
                .ok_or_else(|| Error::BadCheckpoint(format!("missing config key `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::BadCheckpoint(format!("bad integer for `{k}`")))
        };
        Ok(ModelConfig {
            num_modalities: num("model.num_modalities")?,
            num_labels: num("model.num_labels")?,
            num_levels: num("model.num_levels")?,
            base_channels: num("model.base_channels")?,
            fusion: get("model.fusion")?.parse()?,
            skip_fusion: get("model.skip_fusion")?.parse()?,
            variant: get("model.variant")?.parse()?,
        })
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    /// `levels[l] = [first block (stride 2 for l ≥ 1), second block]`
    levels: Vec<[ConvBlock; 2]>,
}

#[derive(Clone, Debug)]
struct DecoderStage {
    level: usize,
    up: ConvTranspose,
    blocks: [ConvBlock; 2],
}

#[derive(Clone, Debug)]
struct EncoderTrace {
    caches: Vec<[BlockCache; 2]>,
    outputs: Vec<Tensor>,
}

#[derive(Clone, Debug)]
enum FuseTrace {
    Identity,
    Mean,
    Project { concat: Tensor },
}

/// Everything the encoder half needs for its backward pass.
#[derive(Clone, Debug)]
pub struct EncodeTrace {
    encoders: Vec<EncoderTrace>,
    fuse: Vec<FuseTrace>,
    fused: Vec<Tensor>,
}

impl EncodeTrace {
    /// Fused features per level; the last entry is the bottleneck.
    pub fn fused(&self) -> &[Tensor] {
        &self.fused
    }

    pub fn bottleneck(&self) -> &Tensor {
        self.fused.last().expect("at least two levels")
    }
}

#[derive(Clone, Debug)]
struct StageTrace {
    up_input: Tensor,
    caches: [BlockCache; 2],
}

/// Cached activations of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    encode: EncodeTrace,
    stages: Vec<StageTrace>,
    head_input: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    encoders: Vec<Encoder>,
    /// One entry per level (skips then bottleneck); `None` when that level
    /// fuses by mean or there is a single encoder.
    fusers: Vec<Option<Conv>>,
    stages: Vec<DecoderStage>,
    head: Conv,
    cache: Option<ForwardTrace>,
}

impl Model {
    /// Builds and He-initialises a network. Parameter creation order (and so
    /// RNG consumption) is: encoders, fusers, decoder, head.
    pub fn build(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Model> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let levels = cfg.num_levels;
        let n_enc = cfg.num_encoders();
        let encoders = (0..n_enc)
            .map(|e| {
                let mut cin = cfg.encoder_in_channels();
                let levels = (0..levels)
                    .map(|l| {
                        let c = cfg.channels(l);
                        let stride = if l == 0 { 1 } else { 2 };
                        let b0 = ConvBlock::new(&mut store, &format!("enc{e}.l{l}.b0"), cin, c, stride, rng);
                        let b1 = ConvBlock::new(&mut store, &format!("enc{e}.l{l}.b1"), c, c, 1, rng);
                        cin = c;
                        [b0, b1]
                    })
                    .collect();
                Encoder { levels }
            })
            .collect();
        let fusers = (0..levels)
            .map(|l| {
                let mode = if l == levels - 1 { cfg.fusion } else { cfg.skip_fusion };
                (n_enc > 1 && mode == Fusion::ConcatProject).then(|| {
                    let c = cfg.channels(l);
                    let id = if l == levels - 1 {
                        "fuse.bottleneck".to_string()
                    } else {
                        format!("fuse.skip{l}")
                    };
                    Conv::new(&mut store, &id, n_enc * c, c, 1, 1, rng)
                })
            })
            .collect();
        let stages = (0..levels - 1)
            .rev()
            .map(|l| {
                let c = cfg.channels(l);
                DecoderStage {
                    level: l,
                    up: ConvTranspose::new(&mut store, &format!("dec.l{l}.up"), cfg.channels(l + 1), c, rng),
                    blocks: [
                        ConvBlock::new(&mut store, &format!("dec.l{l}.b0"), 2 * c, c, 1, rng),
                        ConvBlock::new(&mut store, &format!("dec.l{l}.b1"), c, c, 1, rng),
                    ],
                }
            })
            .collect();
        let head = Conv::new(&mut store, "head", cfg.channels(0), cfg.num_labels, 1, 1, rng);
        Ok(Model {
            cfg: cfg.clone(),
            store,
            encoders,
            fusers,
            stages,
            head,
            cache: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Ids of all encoder parameters (`enc*`).
    pub fn encoder_param_ids(&self) -> Vec<String> {
        self.store
            .params()
            .iter()
            .filter(|p| p.id.starts_with("enc"))
            .map(|p| p.id.clone())
            .collect()
    }

    fn check_inputs(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        if inputs.len() != self.cfg.num_modalities {
            return Err(Error::ModalityCountMismatch {
                expected: self.cfg.num_modalities,
                actual: inputs.len(),
            });
        }
        let spatial = inputs[0].spatial();
        for t in inputs {
            if t.channels() != 1 || t.rank() < 3 || t.rank() > 4 {
                return Err(Error::InvalidShape {
                    shape: t.shape().to_vec(),
                    reason: "each modality input must be a single-channel patch".into(),
                });
            }
            if t.spatial() != spatial {
                return Err(Error::shape("modality patch", &spatial, &t.spatial()));
            }
        }
        let div = self.cfg.size_divisor();
        if spatial.iter().any(|s| s % div != 0) {
            return Err(Error::ConfigInvalid(format!(
                "patch {spatial:?} not divisible by {div} for {} levels",
                self.cfg.num_levels
            )));
        }
        let single: Vec<Tensor> = inputs.iter().map(|t| t.clone().into_channels_first()).collect();
        Ok(match self.cfg.variant {
            Variant::MultiEncoder => single,
            Variant::Vanilla => {
                let refs: Vec<&Tensor> = single.iter().collect();
                vec![Tensor::concat_channels(&refs)?]
            }
        })
    }

    fn run_encoder(&self, enc: &Encoder, x: Tensor) -> Result<EncoderTrace> {
        let mut caches = Vec::with_capacity(enc.levels.len());
        let mut outputs = Vec::with_capacity(enc.levels.len());
        let mut x = x;
        for [b0, b1] in &enc.levels {
            let (h, c0) = b0.forward(&self.store, &x)?;
            let (h, c1) = b1.forward(&self.store, &h)?;
            caches.push([c0, c1]);
            outputs.push(h.clone());
            x = h;
        }
        Ok(EncoderTrace { caches, outputs })
    }

    fn fusion_mode(&self, level: usize) -> Fusion {
        if level == self.cfg.num_levels - 1 {
            self.cfg.fusion
        } else {
            self.cfg.skip_fusion
        }
    }

    /// Runs every encoder and fuses their per-level outputs.
    pub fn encode(&self, inputs: &[Tensor]) -> Result<EncodeTrace> {
        let streams = self.check_inputs(inputs)?;
        let encoders = par::map(streams.len(), |e| self.run_encoder(&self.encoders[e], streams[e].clone()))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mut fuse = Vec::with_capacity(self.cfg.num_levels);
        let mut fused = Vec::with_capacity(self.cfg.num_levels);
        for l in 0..self.cfg.num_levels {
            let feats: Vec<&Tensor> = encoders.iter().map(|t| &t.outputs[l]).collect();
            let (f, tr) = self.fuse_level(l, &feats)?;
            fused.push(f);
            fuse.push(tr);
        }
        Ok(EncodeTrace { encoders, fuse, fused })
    }

    fn fuse_level(&self, level: usize, feats: &[&Tensor]) -> Result<(Tensor, FuseTrace)> {
        if feats.len() == 1 {
            return Ok((feats[0].clone(), FuseTrace::Identity));
        }
        match (self.fusion_mode(level), &self.fusers[level]) {
            (Fusion::ConcatProject, Some(conv)) => {
                let concat = Tensor::concat_channels(feats)?;
                let out = conv.forward(&self.store, &concat)?;
                Ok((out, FuseTrace::Project { concat }))
            }
            _ => Ok((fuse_mean(feats)?, FuseTrace::Mean)),
        }
    }

    /// Backpropagates gradients on the fused per-level features (missing
    /// levels are treated as zero) into every encoder.
    pub fn encode_backward(&self, trace: &EncodeTrace, grad_fused: &[Option<Tensor>], grads: &mut [Tensor]) -> Result<()> {
        let levels = self.cfg.num_levels;
        let n_enc = trace.encoders.len();
        // per-encoder, per-level gradient on the level output
        let mut level_grads: Vec<Vec<Option<Tensor>>> = vec![vec![None; levels]; n_enc];
        for l in 0..levels {
            let Some(g) = grad_fused.get(l).and_then(|g| g.as_ref()) else {
                continue;
            };
            let per_enc: Vec<Tensor> = match &trace.fuse[l] {
                FuseTrace::Identity => vec![g.clone()],
                FuseTrace::Mean => {
                    let mut s = g.clone();
                    s.scale(1.0 / n_enc as f64);
                    vec![s; n_enc]
                }
                FuseTrace::Project { concat } => {
                    let conv = self.fusers[l].as_ref().expect("projection fuser");
                    let gc = conv.backward(&self.store, concat, g, grads)?;
                    gc.split_channels(&vec![self.cfg.channels(l); n_enc])
                }
            };
            for (e, ge) in per_enc.into_iter().enumerate() {
                level_grads[e][l] = Some(ge);
            }
        }
        let shapes: Vec<Vec<usize>> = grads.iter().map(|g| g.shape().to_vec()).collect();
        let per_encoder = par::map(n_enc, |e| -> Result<Vec<Tensor>> {
            let mut local: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            self.encoder_backward(e, &trace.encoders[e], &level_grads[e], &mut local)?;
            Ok(local)
        });
        for local in per_encoder {
            let local = local?;
            for (g, l) in grads.iter_mut().zip(&local) {
                g.add_assign(l);
            }
        }
        Ok(())
    }

    fn encoder_backward(&self, e: usize, trace: &EncoderTrace, level_grads: &[Option<Tensor>], grads: &mut [Tensor]) -> Result<()> {
        let enc = &self.encoders[e];
        let mut carry: Option<Tensor> = None;
        for l in (0..enc.levels.len()).rev() {
            let g = match (&level_grads[l], carry.take()) {
                (Some(a), Some(mut b)) => {
                    b.add_assign(a);
                    b
                }
                (Some(a), None) => a.clone(),
                (None, Some(b)) => b,
                (None, None) => continue,
            };
            let [b0, b1] = &enc.levels[l];
            let [c0, c1] = &trace.caches[l];
            let g = b1.backward(&self.store, c1, &g, grads)?;
            let g = b0.backward(&self.store, c0, &g, grads)?;
            if l > 0 {
                carry = Some(g);
            }
        }
        Ok(())
    }

    /// Forward pass returning the logits and the activations for backward.
    pub fn forward_traced(&self, inputs: &[Tensor]) -> Result<(Tensor, ForwardTrace)> {
        let encode = self.encode(inputs)?;
        let mut x = encode.bottleneck().clone();
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let up = stage.up.forward(&self.store, &x)?;
            let cat = Tensor::concat_channels(&[&up, &encode.fused[stage.level]])?;
            let (h, c0) = stage.blocks[0].forward(&self.store, &cat)?;
            let (h, c1) = stage.blocks[1].forward(&self.store, &h)?;
            stages.push(StageTrace {
                up_input: x,
                caches: [c0, c1],
            });
            x = h;
        }
        let logits = self.head.forward(&self.store, &x)?;
        Ok((
            logits,
            ForwardTrace {
                encode,
                stages,
                head_input: x,
            },
        ))
    }

    /// Adds the gradients of all parameters for upstream `grad_logits` into
    /// `grads` (aligned with [`ParamStore`] slots).
    pub fn gradients(&self, trace: &ForwardTrace, grad_logits: &Tensor, grads: &mut [Tensor]) -> Result<()> {
        let mut g = self.head.backward(&self.store, &trace.head_input, grad_logits, grads)?;
        let mut grad_fused: Vec<Option<Tensor>> = vec![None; self.cfg.num_levels];
        for (stage, st) in self.stages.iter().zip(&trace.stages).rev() {
            let gh = stage.blocks[1].backward(&self.store, &st.caches[1], &g, grads)?;
            let gcat = stage.blocks[0].backward(&self.store, &st.caches[0], &gh, grads)?;
            let c = self.cfg.channels(stage.level);
            let mut parts = gcat.split_channels(&[c, c]);
            let g_skip = parts.pop().expect("skip part");
            let g_up = parts.pop().expect("up part");
            grad_fused[stage.level] = Some(g_skip);
            g = stage.up.backward(&self.store, &st.up_input, &g_up, grads)?;
        }
        let last = self.cfg.num_levels - 1;
        grad_fused[last] = Some(g);
        self.encode_backward(&trace.encode, &grad_fused, grads)
    }

    /// Inference-only forward pass.
    pub fn predict(&self, inputs: &[Tensor]) -> Result<Tensor> {
        self.forward_traced(inputs).map(|(logits, _)| logits)
    }

    /// Logits for several cases, evaluated in parallel.
    pub fn forward_batch(&self, batch: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
        par::map(batch.len(), |i| self.predict(&batch[i]))
            .into_iter()
            .collect()
    }

    /// Forward pass that caches activations for a later [`Model::backward`].
    pub fn forward(&mut self, inputs: &[Tensor]) -> Result<Tensor> {
        let (logits, trace) = self.forward_traced(inputs)?;
        self.cache = Some(trace);
        Ok(logits)
    }

    /// Accumulates parameter gradients for the cached forward pass into each
    /// `Param::grad`.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        let trace = self.cache.as_ref().ok_or(Error::NoCachedForward)?;
        let mut grads = self.store.grad_buffers();
        self.gradients(trace, grad_logits, &mut grads)?;
        self.store.accumulate(&grads);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.store.zero_grads();
    }

    /// Serialises the config and every parameter.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (k, v) in self.cfg.to_kv() {
            ck.set_meta(&k, v);
        }
        for p in self.store.params() {
            ck.push_tensor(&p.id, p.value.clone());
        }
        ck
    }

    /// Restores a model shaped by `expected` from a checkpoint.
    ///
    /// `Full` requires an identical config and every parameter present.
    /// `EncodersOnly` requires matching encoder topology, copies encoder
    /// tensors and keeps the freshly initialised fusion/decoder/head weights.
    pub fn from_checkpoint(ck: &Checkpoint, expected: &ModelConfig, mode: LoadMode, rng: &mut SeededRng) -> Result<Model> {
        let found = ModelConfig::from_checkpoint(ck)?;
        let mut model = Model::build(expected, rng)?;
        match mode {
            LoadMode::Full => {
                compare_configs(&found, expected, &ALL_KEYS)?;
                let ids: Vec<String> = model.store.params().iter().map(|p| p.id.clone()).collect();
                for id in ids {
                    let t = ck.tensor(&id).ok_or_else(|| Error::MissingParam(id.clone()))?;
                    model.store.set_value(&id, t.clone())?;
                }
            }
            LoadMode::EncodersOnly(transfer) => {
                compare_configs(&found, expected, &["model.num_levels", "model.base_channels", "model.variant"])?;
                let ids = model.encoder_param_ids();
                for id in ids {
                    let source_id = match transfer {
                        EncoderTransfer::PerModality => id.clone(),
                        EncoderTransfer::Replicate { source } => {
                            let rest = id.split_once('.').map(|(_, r)| r).unwrap_or("");
                            format!("enc{source}.{rest}")
                        }
                    };
                    let t = ck.tensor(&source_id).ok_or_else(|| Error::MissingParam(source_id.clone()))?;
                    model.store.set_value(&id, t.clone()).map_err(|e| match e {
                        Error::ShapeMismatch { .. } => Error::ConfigMismatch {
                            key: format!("parameter `{source_id}` shape"),
                            found: format!("{:?}", t.shape()),
                            expected: format!("{:?}", model.store.by_id(&id).map(|p| p.value.shape().to_vec())),
                        },
                        other => other,
                    })?;
                }
            }
        }
        Ok(model)
    }
}

const ALL_KEYS: [&str; 7] = [
    "model.num_modalities",
    "model.num_labels",
    "model.num_levels",
    "model.base_channels",
    "model.fusion",
    "model.skip_fusion",
    "model.variant",
];

fn compare_configs(found: &ModelConfig, expected: &ModelConfig, keys: &[&str]) -> Result<()> {
    let f = found.to_kv();
    let e = expected.to_kv();
    for ((fk, fv), (_, ev)) in f.iter().zip(&e) {
        if keys.contains(&fk.as_str()) && fv != ev {
            return Err(Error::ConfigMismatch {
                key: fk.clone(),
                found: fv.clone(),
                expected: ev.clone(),
            });
        }
    }
    Ok(())
}

/// How checkpoint weights are transferred into a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    Full,
    EncodersOnly(EncoderTransfer),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderTransfer {
    /// Encoder `e` of the checkpoint initialises encoder `e`.
    PerModality,
    /// One checkpoint encoder initialises every encoder.
    Replicate { source: usize },
}

fn fuse_mean(feats: &[&Tensor]) -> Result<Tensor> {
    let mut acc = feats[0].clone();
    for f in &feats[1..] {
        if f.shape() != acc.shape() {
            return Err(Error::shape("fused feature", acc.shape(), f.shape()));
        }
        acc.add_assign(f);
    }
    acc.scale(1.0 / feats.len() as f64);
    Ok(acc)
}

/// Combines per-modality feature maps of equal shape `[C, d, h, w]`.
///
/// `Mean` averages element-wise. `ConcatProject` concatenates to `M·C`
/// channels and applies the 1×1×1 projection `(weight [C, M·C, 1, 1, 1],
/// bias [C])`, which must be supplied.
pub fn fuse_bottleneck(features: &[Tensor], mode: Fusion, projection: Option<(&Tensor, &Tensor)>) -> Result<Tensor> {
    let first = features.first().ok_or_else(|| Error::InvalidShape {
        shape: vec![],
        reason: "no features to fuse".into(),
    })?;
    for f in features {
        if f.shape() != first.shape() {
            return Err(Error::shape("fused feature", first.shape(), f.shape()));
        }
    }
    let refs: Vec<&Tensor> = features.iter().collect();
    match mode {
        Fusion::Mean => fuse_mean(&refs),
        Fusion::ConcatProject => {
            let (w, b) = projection.ok_or_else(|| Error::ConfigInvalid("concat_project fusion needs projection weights".into()))?;
            let concat = Tensor::concat_channels(&refs)?;
            crate::nn::conv3d_forward(&concat, w, b, 1, 0)
        }
    }
}
