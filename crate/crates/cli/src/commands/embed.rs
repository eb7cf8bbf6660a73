use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mmcontrast_core::model::{fuse, Modality};
use mmcontrast_core::training::encode_dataset;
use tracing::info;

use super::{label_bits, load_checkpoint, open_output};
use crate::pca::pca_2d;
use crate::{CliError, ExperimentConfig, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingSpace {
    /// Concatenated encoder features.
    H,
    /// Concatenated projections.
    Z,
}

impl EmbeddingSpace {
    fn tag(self) -> &'static str {
        match self {
            EmbeddingSpace::H => "h",
            EmbeddingSpace::Z => "z",
        }
    }
}

/// Writes `embeddings_<space>.tsv` (id, label bits, vector) for every
/// sample, plus `embeddings_<space>_pca.tsv` when `pca` is set. Returns
/// the written paths.
pub fn export_embeddings(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    space: EmbeddingSpace,
    pca: bool,
) -> Result<Vec<PathBuf>> {
    let data = cfg.load_dataset()?;
    let model = load_checkpoint(cfg, checkpoint, &data)?;
    let mut ids = HashSet::new();
    if let Some(dup) = data.samples.iter().find(|s| !ids.insert(s.id.as_str())) {
        return Err(CliError::Config(format!("duplicate sample id `{}`", dup.id)));
    }
    let h1 = encode_dataset(&model, &data, Modality::S1)?;
    let h2 = encode_dataset(&model, &data, Modality::S2)?;
    let vectors = match space {
        EmbeddingSpace::H => fuse(&h1, &h2)?,
        EmbeddingSpace::Z => fuse(&model.project(Modality::S1, &h1)?, &model.project(Modality::S2, &h2)?)?,
    };
    info!(samples = data.len(), dim = vectors.ncols(), space = space.tag(), "exporting embeddings");

    let header = |cols: &mut dyn Iterator<Item = String>| {
        let mut line = String::from("id\tlabels");
        for c in cols {
            line.push('\t');
            line.push_str(&c);
        }
        line.push('\n');
        line
    };
    let mut out = header(&mut (0..vectors.ncols()).map(|j| format!("{}{j}", space.tag())));
    for (s, row) in data.samples.iter().zip(vectors.outer_iter()) {
        let _ = write!(out, "{}\t{}", s.id, label_bits(&s.labels));
        for v in row {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    let mut art = open_output(cfg)?;
    let mut paths = vec![art.write(&format!("embeddings_{}.tsv", space.tag()), out.as_bytes())?];
    if pca {
        let proj = pca_2d(&vectors.mapv(f64::from));
        let mut out = header(&mut ["pc1", "pc2"].into_iter().map(String::from));
        for (s, row) in data.samples.iter().zip(proj.outer_iter()) {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", s.id, label_bits(&s.labels), row[0], row[1]);
        }
        paths.push(art.write(&format!("embeddings_{}_pca.tsv", space.tag()), out.as_bytes())?);
    }
    art.finish()?;
    Ok(paths)
}
