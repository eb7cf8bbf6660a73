use std::path::Path;

use mmcontrast_core::metrics::MetricReport;
use mmcontrast_core::training::evaluate_model;
use tracing::info;

use super::{held_out, load_checkpoint, open_output};
use crate::{CliError, ExperimentConfig, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    /// The protocol's held-out split.
    HeldOut,
    All,
}

/// Evaluates a checkpoint; writes `eval.json` and `eval_per_class.csv`.
pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path, split: EvalSplit, threshold: Option<f64>) -> Result<MetricReport> {
    let threshold = threshold.unwrap_or(cfg.metrics.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Config(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    let data = cfg.load_dataset()?;
    let model = load_checkpoint(cfg, checkpoint, &data)?;
    let data = match split {
        EvalSplit::HeldOut => held_out(cfg, &data),
        EvalSplit::All => data,
    };
    let report = evaluate_model(&model, &data, threshold)?;
    info!(samples = data.len(), micro_f1 = report.micro_f1, "evaluated");
    let mut art = open_output(cfg)?;
    art.write_json("eval.json", &report)?;
    art.write("eval_per_class.csv", report.per_class_csv().as_bytes())?;
    art.finish()?;
    Ok(report)
}
