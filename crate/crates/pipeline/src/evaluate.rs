//! Scoring saved predictions against ground-truth masks.

use modfuse_core::metrics::{evaluate_all, MetricsReport};

use crate::config::Config;
use crate::data::{read_labels, read_manifest};
use crate::error::{PipelineError, Result};
use crate::predict::pred_path;
use crate::train::{ensure_dir, write_text};

pub const METRICS_TEXT: &str = "metrics.txt";
pub const METRICS_KV: &str = "metrics.kv";

/// Evaluates `{id}_pred.nii` in `eval.pred_dir` for every case of
/// `eval.gt_manifest` and writes the text and key-value reports into
/// `output_dir`.
pub fn cmd_evaluate(cfg: &Config) -> Result<MetricsReport> {
    let (manifest, base) = read_manifest(&cfg.eval.gt_manifest, cfg.model.num_modalities)?;
    let mut cases = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let pred = pred_path(&cfg.eval.pred_dir, &e.case_id);
        if !pred.is_file() {
            return Err(PipelineError::MissingCase(e.case_id.clone()));
        }
        let gt = e
            .mask_path
            .as_ref()
            .ok_or_else(|| PipelineError::InvalidData(format!("case `{}` has no ground-truth mask", e.case_id)))?;
        let gt = if gt.is_absolute() { gt.clone() } else { base.join(gt) };
        cases.push((e.case_id.clone(), read_labels(&pred)?, read_labels(&gt)?));
    }
    let report = evaluate_all(&cases, &cfg.eval.regions)?;
    ensure_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join(METRICS_TEXT), &report.to_text())?;
    write_text(&cfg.output_dir.join(METRICS_KV), &report.to_kv())?;
    Ok(report)
}
