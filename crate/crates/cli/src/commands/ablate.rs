use std::fmt::Write as _;
use std::path::Path;

use mmcontrast_core::data::{Dataset, Image, Patch};
use mmcontrast_core::metrics::MetricReport;
use mmcontrast_core::model::{snapshot_to_bytes, DualEncoderModel, Modality};
use mmcontrast_core::training::{evaluate_model, run_once};
use ndarray::{Array1, Array3, Axis};
use serde::Serialize;
use tracing::info;

use super::{load_checkpoint, open_output};
use crate::{ExperimentConfig, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub regime: String,
    /// The full-input reference row, not part of the standard table.
    pub extension: bool,
    pub macro_p: f64,
    pub macro_r: f64,
    pub macro_f1: f64,
    pub micro_p: f64,
    pub micro_r: f64,
    pub micro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, regime: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.regime == regime)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("regime,macro_p,macro_r,macro_f1,micro_p,micro_r,micro_f1\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.regime, r.macro_p, r.macro_r, r.macro_f1, r.micro_p, r.micro_r, r.micro_f1
            );
        }
        out
    }
}

pub const ONLY_S1: &str = "Only S1 + No S2";
pub const ONLY_S2: &str = "Only S2 + No S1";
pub const S1_AVG_S2: &str = "S1 + Average S2";
pub const S2_AVG_S1: &str = "S2 + Average S1";
pub const FULL: &str = "S1 + S2 (extension)";

#[derive(Clone, Copy)]
enum Fill {
    Zero,
    Mean,
}

/// Evaluates the held-out split with one modality blanked out: replaced by
/// zeros ("No") or by the per-channel training mean ("Average"). Without a
/// checkpoint, one model is trained from the config first.
pub fn ablate_modality(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<AblationTable> {
    let data = cfg.load_dataset()?;
    let mc = cfg.model_for(&data)?;
    let mut art = open_output(cfg)?;
    let model = match checkpoint {
        Some(p) => load_checkpoint(cfg, p, &data)?,
        None => {
            let tc = cfg.train_config();
            info!(recipe = %tc.recipe.name(), seed = tc.seed, "training the model to ablate");
            let trained = run_once(&mc, &tc, &data, tc.seed)?;
            art.write("ablation_model.ckpt", &snapshot_to_bytes(&trained.model))?;
            trained.model
        }
    };
    let t = &cfg.training.train;
    let (pool, held) = data.split(t.held_out_fraction, t.split_seed);
    let means = [channel_mean(&pool, Modality::S1)?, channel_mean(&pool, Modality::S2)?];
    let threshold = cfg.metrics.threshold;

    let regimes = [
        (ONLY_S1, Some((Modality::S2, Fill::Zero))),
        (ONLY_S2, Some((Modality::S1, Fill::Zero))),
        (S1_AVG_S2, Some((Modality::S2, Fill::Mean))),
        (S2_AVG_S1, Some((Modality::S1, Fill::Mean))),
        (FULL, None),
    ];
    let mut rows = Vec::with_capacity(regimes.len());
    for (name, blank) in regimes {
        let report = match blank {
            None => evaluate_model(&model, &held, threshold)?,
            Some((m, fill)) => {
                let mean = &means[usize::from(m == Modality::S2)];
                evaluate_blanked(&model, &held, m, fill, mean, threshold)?
            }
        };
        info!(regime = name, micro_f1 = report.micro_f1, "ablation");
        rows.push(row(name, blank.is_none(), &report));
    }
    let table = AblationTable { rows };
    art.write("ablation.csv", table.to_csv().as_bytes())?;
    art.write_json("ablation.json", &table)?;
    art.finish()?;
    Ok(table)
}

fn evaluate_blanked(
    model: &DualEncoderModel<f32>,
    data: &Dataset,
    m: Modality,
    fill: Fill,
    mean: &Array1<f32>,
    threshold: f64,
) -> Result<MetricReport> {
    let mut blanked = data.clone();
    for s in &mut blanked.samples {
        let slot = match m {
            Modality::S1 => &mut s.s1,
            Modality::S2 => &mut s.s2,
        };
        let dim = slot.get()?.dim();
        let image: Image = match fill {
            Fill::Zero => Array3::zeros(dim),
            Fill::Mean => Array3::from_shape_fn(dim, |(c, _, _)| mean[c]),
        };
        *slot = Patch::in_memory(image);
    }
    Ok(evaluate_model(model, &blanked, threshold)?)
}

/// Per-channel mean over every pixel of every patch.
fn channel_mean(data: &Dataset, m: Modality) -> Result<Array1<f32>> {
    let mut sum: Option<Array1<f64>> = None;
    let mut count = 0usize;
    for s in &data.samples {
        let img = match m {
            Modality::S1 => s.s1.get()?,
            Modality::S2 => s.s2.get()?,
        };
        let (_, h, w) = img.dim();
        let part = img.mapv(f64::from).sum_axis(Axis(2)).sum_axis(Axis(1));
        count += h * w;
        sum = Some(match sum {
            None => part,
            Some(acc) => acc + part,
        });
    }
    Ok(sum.map(|s| s.mapv(|v| (v / count.max(1) as f64) as f32)).unwrap_or_else(|| Array1::zeros(0)))
}

fn row(regime: &str, extension: bool, r: &MetricReport) -> AblationRow {
    AblationRow {
        regime: regime.to_string(),
        extension,
        macro_p: r.macro_p,
        macro_r: r.macro_r,
        macro_f1: r.macro_f1,
        micro_p: r.micro_p,
        micro_r: r.micro_r,
        micro_f1: r.micro_f1,
    }
}
