//! Workflows around the `modfuse-core` engine: synthetic data generation,
//! self-supervised pretraining, supervised training, sliding-window
//! prediction and evaluation. The `modfuse` binary exposes each as a
//! subcommand.

pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod generate;
pub mod predict;
pub mod pretrain;
pub mod train;

pub use config::Config;
pub use error::{PipelineError, Result};
