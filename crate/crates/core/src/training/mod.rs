//! Loss recipes, the composite training step, sequential (pretrain then
//! linear probe) and joint optimization, and the multi-seed protocol.

mod batch;
mod optim;
mod recipe;
mod run;
mod step;

pub use batch::{mix, Batch, BatchNeeds, ViewPair};
pub use optim::Adam;
pub use recipe::{BceSource, LossRecipe, RecipeName, RecipeSpec, TrainMode};
pub use run::{
    aggregate_reports, encode_dataset, evaluate_model, predict_probs, prepare_run, run_once, run_protocol, run_seeds,
    train_joint, train_sequential, AggregateReport, ClassAggregate, CurvePoint, EvalPoint, MeanStd, Monitor,
    NoMonitor, Phase, ProtocolResult, RunData, RunResult, TrainedRun,
};
pub use step::{build_step, StepOutput};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AugmentPolicy, DataError};
use crate::losses::{LossError, TermId, Temperature};
use crate::metrics::MetricError;
use crate::model::{ModelConfig, ModelError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0:?} recipe passed to a {1} trainer")]
    Mode(TrainMode, &'static str),
    #[error("recipe consumes labels but the batch is unlabeled")]
    MissingLabels,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Contrastive temperatures: one default plus per-term overrides.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Temperatures {
    pub default: Temperature,
    pub per_term: BTreeMap<TermId, Temperature>,
}

impl Temperatures {
    pub fn for_term(&self, term: TermId) -> Temperature {
        self.per_term.get(&term).copied().unwrap_or(self.default)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub recipe: LossRecipe,
    /// Joint-mode epochs.
    pub epochs: usize,
    /// Sequential mode: contrastive pretraining epochs.
    pub pretrain_epochs: usize,
    /// Sequential mode: linear-probe epochs on frozen features.
    pub probe_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub probe_learning_rate: f64,
    pub temperatures: Temperatures,
    pub seed: u64,
    pub label_fraction: f64,
    /// Share of the dataset held out for evaluation.
    pub held_out_fraction: f64,
    /// Seed of the held-out split; keep it fixed per dataset.
    pub split_seed: u64,
    /// Evaluate on the held-out split every this many epochs; 0 means only
    /// at the end.
    pub eval_cadence: usize,
    pub eval_threshold: f64,
    pub augmentation: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            recipe: LossRecipe::mosaic1(),
            epochs: 200,
            pretrain_epochs: 100,
            probe_epochs: 100,
            batch_size: 64,
            learning_rate: 3e-3,
            probe_learning_rate: 1e-2,
            temperatures: Temperatures::default(),
            seed: 0,
            label_fraction: 0.1,
            held_out_fraction: 0.2,
            split_seed: 0,
            eval_cadence: 0,
            eval_threshold: 0.5,
            augmentation: AugmentPolicy::default(),
        }
    }
}

/// Smallest batch that leaves every contrastive anchor some negatives.
pub const MIN_BATCH_SIZE: usize = 4;

impl TrainConfig {
    pub fn for_recipe(recipe: LossRecipe) -> Self {
        Self {
            recipe,
            ..Self::default()
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_size < MIN_BATCH_SIZE {
            return fail(format!("batch_size must be at least {MIN_BATCH_SIZE}, got {}", self.batch_size));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return fail(format!("label_fraction must lie in (0, 1], got {}", self.label_fraction));
        }
        if !(self.held_out_fraction > 0.0 && self.held_out_fraction < 1.0) {
            return fail(format!("held_out_fraction must lie in (0, 1), got {}", self.held_out_fraction));
        }
        for (name, lr) in [("learning_rate", self.learning_rate), ("probe_learning_rate", self.probe_learning_rate)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(0.0..=1.0).contains(&self.eval_threshold) {
            return fail(format!("eval_threshold must lie in [0, 1], got {}", self.eval_threshold));
        }
        if self.recipe.has(TermId::Inter) && model.projection_dim_s1 != model.projection_dim_s2 {
            return fail(format!(
                "inter-modal contrast needs equal projection widths, got {} and {}",
                model.projection_dim_s1, model.projection_dim_s2
            ));
        }
        self.augmentation.validate()?;
        model.validate()?;
        Ok(())
    }
}
