//! Volumetric segmentation engine built around a multi-encoder U-Net.
//!
//! Every modality of a case gets its own convolutional encoder; encoder
//! features are fused at the bottleneck (and at the skip levels) and a single
//! shared decoder produces per-voxel label logits. All layers carry explicit,
//! hand-derived backward passes and all math runs in `f64`.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] and [`volume`]: value types, preprocessing and augmentation.
//! * [`nifti`]: NIfTI-1 single-file reader/writer and the case manifest.
//! * [`nn`]: differentiable layer primitives.
//! * [`model`] and [`checkpoint`]: network assembly and persistence.
//! * [`losses`], [`optim`], [`metrics`]: training objectives, update rules,
//!   evaluation.
//! * [`ssl`]: self-supervised proxy heads and view generation.
//! * [`synth`]: deterministic multi-modal phantom generator.
//! * [`par`]: data-parallel helpers (rayon behind the `parallel` feature).

pub mod checkpoint;
mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod nn;
pub mod optim;
pub mod par;
pub mod rng;
pub mod ssl;
pub mod synth;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{BinaryMask, Grid, LabelGrid, Tensor};
pub use volume::{PatchSpec, Volume};
