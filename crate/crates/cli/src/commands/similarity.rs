use mmcontrast_core::data::sample_class_pixels;
use mmcontrast_core::metrics::{self, ClassSimilarityMatrix};
use mmcontrast_core::model::Modality;
use serde::Serialize;

use super::open_output;
use crate::{CliError, ExperimentConfig, Result};

#[derive(Debug, Clone, Serialize)]
pub struct SimilaritySummary {
    pub classes: Vec<String>,
    pub pixels_per_class: usize,
    pub seed: u64,
    pub mean_off_diagonal: f64,
    pub most_similar: Option<(String, String, f64)>,
}

/// Samples S2 pixel spectra per class and writes the `L x L` similarity
/// matrix (`class_similarity.csv`) with a JSON summary.
pub fn class_similarity(
    cfg: &ExperimentConfig,
    pixels_per_class: usize,
    seed: u64,
) -> Result<(ClassSimilarityMatrix, SimilaritySummary)> {
    if pixels_per_class == 0 {
        return Err(CliError::Config("pixels per class must be positive".into()));
    }
    let data = cfg.load_dataset()?;
    let pixels = sample_class_pixels(&data, Modality::S2, pixels_per_class, seed)?;
    let matrix = metrics::class_similarity(&pixels)?;
    let summary = SimilaritySummary {
        classes: matrix.classes.clone(),
        pixels_per_class,
        seed,
        mean_off_diagonal: matrix.mean_off_diagonal(),
        most_similar: matrix
            .most_similar_pair()
            .map(|(a, b, v)| (matrix.classes[a].clone(), matrix.classes[b].clone(), v)),
    };
    let mut art = open_output(cfg)?;
    art.write("class_similarity.csv", matrix.to_csv().as_bytes())?;
    art.write_json("class_similarity.json", &summary)?;
    art.finish()?;
    Ok((matrix, summary))
}
