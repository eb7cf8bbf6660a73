//! Experiment configuration: one TOML file with `dataset`, `model`,
//! `training` and `metrics` sections plus `output_dir`.

use std::path::{Path, PathBuf};

use mmcontrast_core::data::{generate_synthetic, load_manifest, Dataset, SyntheticSpec, Vocabulary};
use mmcontrast_core::model::{EncoderKind, EncoderSpec, ModelConfig, DEFAULT_PROJECTION_DIM};
use mmcontrast_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub metrics: MetricsSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            training: TrainingSection::default(),
            metrics: MetricsSection::default(),
            output_dir: default_output_dir(),
        }
    }
}

/// Exactly one of `synthetic` or `manifest` (the latter with `vocabulary`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            synthetic: Some(SyntheticSpec::default()),
            manifest: None,
            vocabulary: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub s1_encoder: EncoderKind,
    pub s2_encoder: EncoderKind,
    /// Projection width `k`, shared by both heads.
    pub projection_dim: usize,
    pub fusion: Fusion,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            s1_encoder: EncoderKind::SmallConv,
            s2_encoder: EncoderKind::SmallConv,
            projection_dim: DEFAULT_PROJECTION_DIM,
            fusion: Fusion::Concat,
        }
    }
}

/// Training hyperparameters plus the number of protocol runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingSection {
    pub runs: usize,
    #[serde(flatten)]
    pub train: TrainConfig,
}

fn default_runs() -> usize {
    4
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            runs: default_runs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub threshold: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path.parent())
    }

    /// Parses TOML; relative dataset paths resolve against `base`.
    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut training = raw.training.unwrap_or_default();
        // Read separately: `TrainConfig` rejects unknown keys.
        let runs = match training.remove("runs") {
            None => default_runs(),
            Some(v) => v
                .as_integer()
                .and_then(|r| usize::try_from(r).ok())
                .ok_or_else(|| CliError::Config("training.runs must be a non-negative integer".into()))?,
        };
        // The echoed config repeats the threshold under [training].
        if let Some(t) = training.remove("eval_threshold") {
            if t.as_float() != Some(raw.metrics.threshold) {
                return Err(CliError::Config("set the decision threshold in [metrics], not [training]".into()));
            }
        }
        let mut train: TrainConfig = toml::Value::Table(training)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("[training]: {e}")))?;
        train.eval_threshold = raw.metrics.threshold;
        let mut cfg = Self {
            dataset: raw.dataset,
            model: raw.model,
            training: TrainingSection { train, runs },
            metrics: raw.metrics,
            output_dir: raw.output_dir,
        };
        if let Some(base) = base.filter(|b| !b.as_os_str().is_empty()) {
            for p in [&mut cfg.dataset.manifest, &mut cfg.dataset.vocabulary].into_iter().flatten() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Canonical TOML of the merged configuration.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks everything that can be checked without touching patch data.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match (&d.synthetic, &d.manifest) {
            (Some(spec), None) => {
                if d.vocabulary.is_some() {
                    return Err(CliError::Config("vocabulary applies to manifest datasets only".into()));
                }
                spec.validate()?;
            }
            (None, Some(manifest)) => {
                let vocab = d
                    .vocabulary
                    .as_ref()
                    .ok_or_else(|| CliError::Config("a manifest dataset needs a vocabulary path".into()))?;
                for p in [manifest, vocab] {
                    if !p.is_file() {
                        return Err(CliError::Config(format!("{} does not exist", p.display())));
                    }
                }
            }
            _ => {
                return Err(CliError::Config(
                    "[dataset] needs exactly one of `synthetic` or `manifest`".into(),
                ))
            }
        }
        if self.training.runs == 0 {
            return Err(CliError::Config("training.runs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.metrics.threshold) {
            return Err(CliError::Config(format!(
                "metrics.threshold must lie in [0, 1], got {}",
                self.metrics.threshold
            )));
        }
        if let Some(spec) = &d.synthetic {
            let mc = self.model_config(spec.s1_channels, spec.s2_channels, spec.num_labels);
            self.train_config().validate(&mc)?;
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            eval_threshold: self.metrics.threshold,
            ..self.training.train.clone()
        }
    }

    pub fn model_config(&self, s1_channels: usize, s2_channels: usize, num_labels: usize) -> ModelConfig {
        ModelConfig {
            s1: EncoderSpec::new(self.model.s1_encoder, s1_channels),
            s2: EncoderSpec::new(self.model.s2_encoder, s2_channels),
            projection_dim_s1: self.model.projection_dim,
            projection_dim_s2: self.model.projection_dim,
            num_labels,
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let d = &self.dataset;
        if let Some(spec) = &d.synthetic {
            return Ok(generate_synthetic(spec)?);
        }
        let manifest = d.manifest.as_ref().expect("validated");
        let vocab = Vocabulary::load(d.vocabulary.as_ref().expect("validated"))?;
        Ok(load_manifest(manifest, &vocab)?)
    }

    /// Model architecture matching the dataset's channel counts.
    pub fn model_for(&self, data: &Dataset) -> Result<ModelConfig> {
        let first = data
            .samples
            .first()
            .ok_or_else(|| CliError::Config("dataset is empty".into()))?;
        let mc = self.model_config(first.s1.get()?.dim().0, first.s2.get()?.dim().0, data.num_labels());
        self.train_config().validate(&mc)?;
        Ok(mc)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    dataset: DatasetSection,
    #[serde(default)]
    model: ModelSection,
    training: Option<toml::Table>,
    #[serde(default)]
    metrics: MetricsSection,
    #[serde(default = "default_output_dir")]
    output_dir: PathBuf,
}
