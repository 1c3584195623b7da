//! Synthetic dataset generation.

use std::path::PathBuf;

use modfuse_core::nifti::CaseManifest;
use modfuse_core::synth::generate_dataset;

use crate::config::Config;
use crate::error::Result;

/// Writes `synth.num_cases` phantoms and `manifest.csv` into `output_dir`.
pub fn cmd_generate_data(cfg: &Config) -> Result<(CaseManifest, PathBuf)> {
    let s = &cfg.synth;
    let manifest = generate_dataset(&s.spec, s.num_cases, s.base_seed, &cfg.output_dir)?;
    log::info!("wrote {} cases to {}", manifest.entries.len(), cfg.output_dir.display());
    Ok((manifest, cfg.output_dir.join("manifest.csv")))
}
