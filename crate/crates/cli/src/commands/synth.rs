use mmcontrast_core::data::{encode_patch, generate_synthetic, sample_class_pixels, write_manifest, ManifestRecord};
use mmcontrast_core::metrics::class_similarity;
use mmcontrast_core::model::Modality;
use serde::Serialize;
use tracing::info;

use super::open_output;
use crate::{CliError, ExperimentConfig, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCABULARY_FILE: &str = "vocabulary.txt";
const SIMILARITY_PIXELS: usize = 1000;

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub size: usize,
    pub num_labels: usize,
    pub label_cardinality: f64,
    pub class_counts: Vec<usize>,
    pub mean_class_similarity: f64,
    pub class_similarity_target: f64,
}

/// Renders the synthetic dataset to patch files plus a manifest and a
/// vocabulary that `[dataset] manifest = ...` can load back.
pub fn synth(cfg: &ExperimentConfig, seed: Option<u64>) -> Result<SynthSummary> {
    let mut spec = cfg
        .dataset
        .synthetic
        .clone()
        .ok_or_else(|| CliError::Config("synth needs a [dataset.synthetic] section".into()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let mut art = open_output(cfg)?;
    let data = generate_synthetic(&spec)?;
    info!(size = data.len(), dir = %art.dir().display(), "writing patches");

    let mut records = Vec::with_capacity(data.len());
    for s in &data.samples {
        let s1 = format!("patches/{}_s1.bin", s.id);
        let s2 = format!("patches/{}_s2.bin", s.id);
        art.write(&s1, &encode_patch(s.s1.get()?))?;
        art.write(&s2, &encode_patch(s.s2.get()?))?;
        let (lat, lon) = s
            .geokey
            .split_once(',')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| CliError::Config(format!("sample {} has a malformed geokey", s.id)))?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            s1_path: s1.into(),
            s2_path: s2.into(),
            labels: data.vocabulary.decode(&s.labels),
            lat,
            lon,
        });
    }
    let mut manifest = Vec::new();
    write_manifest(&mut manifest, &records)?;
    art.write(MANIFEST_FILE, &manifest)?;
    art.write(VOCABULARY_FILE, data.vocabulary.to_text().as_bytes())?;

    let pixels = sample_class_pixels(&data, Modality::S2, SIMILARITY_PIXELS, spec.seed)?;
    let summary = SynthSummary {
        size: data.len(),
        num_labels: data.num_labels(),
        label_cardinality: data.label_cardinality(),
        class_counts: data.class_counts(),
        mean_class_similarity: class_similarity(&pixels)?.mean_off_diagonal(),
        class_similarity_target: spec.class_similarity_target,
    };
    art.write_json("synth_summary.json", &summary)?;
    art.finish()?;
    Ok(summary)
}
