use mmcontrast_core::model::snapshot_to_bytes;
use mmcontrast_core::training::{aggregate_reports, run_once, run_seeds, AggregateReport, RecipeName, RunResult, TrainMode};
use serde::Serialize;
use serde_json::Value;
use tracing::info;

use super::open_output;
use crate::{CliError, ExperimentConfig, Result};

pub const AGGREGATE_FILE: &str = "aggregate.json";

/// Protocol summary. Holds no timings or paths, so reruns are
/// byte-identical.
#[derive(Debug, Clone, Serialize)]
struct Aggregate<'a> {
    recipe: RecipeName,
    mode: TrainMode,
    label_fraction: f64,
    seeds: &'a [u64],
    subset_hashes: Vec<&'a str>,
    labeled_samples: Vec<usize>,
    #[serde(flatten)]
    report: &'a AggregateReport,
}

pub struct TrainOutcome {
    pub runs: Vec<RunResult>,
    pub aggregate: AggregateReport,
    /// The aggregate exactly as written.
    pub aggregate_json: Value,
}

/// Runs the protocol. Each run's JSON, loss curve and checkpoint are
/// written as soon as the run finishes; the aggregate comes last.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let data = cfg.load_dataset()?;
    let mc = cfg.model_for(&data)?;
    let tc = cfg.train_config();
    let mut art = open_output(cfg)?;
    let seeds = run_seeds(tc.seed, cfg.training.runs);
    let mut runs = Vec::with_capacity(seeds.len());
    for (i, &seed) in seeds.iter().enumerate() {
        info!(run = i, seed, recipe = %tc.recipe.name(), "training");
        let trained = run_once(&mc, &tc, &data, seed)?;
        let mut result = trained.result;
        let ckpt = format!("checkpoints/run{i}.ckpt");
        art.write(&ckpt, &snapshot_to_bytes(&trained.model))?;
        result.checkpoint = Some(ckpt);
        art.write_json(&format!("runs/run{i}.json"), &result)?;
        art.write(&format!("curves/run{i}.csv"), result.curve_csv().as_bytes())?;
        runs.push(result);
    }

    let reports: Vec<_> = runs.iter().map(|r| r.report.clone()).collect();
    let aggregate = aggregate_reports(&reports);
    let mut json = serde_json::to_value(Aggregate {
        recipe: tc.recipe.name(),
        mode: tc.recipe.mode(),
        label_fraction: tc.label_fraction,
        seeds: &seeds,
        subset_hashes: runs.iter().map(|r| r.subset_hash.as_str()).collect(),
        labeled_samples: runs.iter().map(|r| r.labeled_samples).collect(),
        report: &aggregate,
    })
    .map_err(|e| CliError::Config(e.to_string()))?;
    if runs.len() == 1 {
        strip_std(&mut json);
    }
    art.write_json(AGGREGATE_FILE, &json)?;
    art.finish()?;
    Ok(TrainOutcome {
        runs,
        aggregate,
        aggregate_json: json,
    })
}

/// A single run has no spread; drop every `std` field.
fn strip_std(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("std");
            map.values_mut().for_each(strip_std);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_std),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strip_std_reaches_nested_fields() {
        let mut v = serde_json::json!({"a": {"mean": 1.0, "std": 0.0}, "b": [{"std": 2, "x": 1}]});
        strip_std(&mut v);
        assert_eq!(v, serde_json::json!({"a": {"mean": 1.0}, "b": [{"x": 1}]}));
    }
}
