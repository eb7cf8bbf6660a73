//! One function per subcommand. Each validates its configuration before
//! touching data and writes its outputs through [`Artifacts`].

mod ablate;
mod embed;
mod eval;
mod similarity;
mod synth;
mod train;

use std::path::{Path, PathBuf};

use mmcontrast_core::data::Dataset;
use mmcontrast_core::model::{restore_from_bytes, DualEncoderModel};
use mmcontrast_core::training::{LossRecipe, RecipeName};

pub use ablate::{ablate_modality, AblationRow, AblationTable, FULL, ONLY_S1, ONLY_S2, S1_AVG_S2, S2_AVG_S1};
pub use embed::{export_embeddings, EmbeddingSpace};
pub use eval::{eval, EvalSplit};
pub use similarity::{class_similarity, SimilaritySummary};
pub use synth::{synth, SynthSummary, MANIFEST_FILE, VOCABULARY_FILE};
pub use train::{train, TrainOutcome, AGGREGATE_FILE};

use crate::io::Artifacts;
use crate::{CliError, ExperimentConfig, Result};

pub const CONFIG_ECHO: &str = "config.toml";

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Base seed: the training seed, or the generator seed for `synth`.
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub recipe: Option<RecipeName>,
    pub label_fraction: Option<f64>,
    pub runs: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            cfg.training.train.seed = seed;
        }
        if let Some(out) = &self.output {
            cfg.output_dir = out.clone();
        }
        if let Some(name) = self.recipe {
            if name == RecipeName::Custom {
                return Err(CliError::Config("custom recipes are defined in the config file".into()));
            }
            cfg.training.train.recipe = LossRecipe::preset(name);
        }
        if let Some(f) = self.label_fraction {
            cfg.training.train.label_fraction = f;
        }
        if let Some(r) = self.runs {
            cfg.training.runs = r;
        }
        Ok(())
    }
}

/// Loads the config (or the defaults), applies overrides and validates.
pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn open_output(cfg: &ExperimentConfig) -> Result<Artifacts> {
    let mut art = Artifacts::open(&cfg.output_dir)?;
    art.write(CONFIG_ECHO, cfg.to_toml()?.as_bytes())?;
    Ok(art)
}

fn load_checkpoint(cfg: &ExperimentConfig, path: &Path, data: &Dataset) -> Result<DualEncoderModel<f32>> {
    let mc = cfg.model_for(data)?;
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(restore_from_bytes(&bytes, Some(&mc))?)
}

/// The held-out split the training protocol evaluates on.
fn held_out(cfg: &ExperimentConfig, data: &Dataset) -> Dataset {
    let t = &cfg.training.train;
    data.split(t.held_out_fraction, t.split_seed).1
}

fn label_bits(labels: &[u8]) -> String {
    labels.iter().map(|b| if *b == 1 { '1' } else { '0' }).collect()
}
