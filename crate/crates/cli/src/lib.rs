//! Config-driven experiment commands: dataset generation, training,
//! evaluation, modality ablation, embedding export and class similarity.

pub mod commands;
pub mod config;
pub mod io;
pub mod pca;

use std::path::{Path, PathBuf};

use mmcontrast_core::data::DataError;
use mmcontrast_core::metrics::MetricError;
use mmcontrast_core::model::ModelError;
use mmcontrast_core::training::TrainError;
use thiserror::Error;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
