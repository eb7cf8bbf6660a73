//! Co-registered multi-modal samples, synthetic generation, manifest
//! ingestion, augmentation and stratified subsampling.

mod augment;
mod manifest;
mod patch_io;
mod stratify;
mod synthetic;
mod vocabulary;

pub use augment::{augment, AugmentPolicy};
pub use manifest::{geokey, load_manifest, write_manifest, ManifestRecord};
pub use patch_io::{decode_patch, encode_patch, read_patch, write_patch, DType, PATCH_MAGIC};
pub use stratify::{max_rate_deviation, stratified_indices, stratified_subsample, subset_hash, STRATIFICATION_TOLERANCE};
pub use synthetic::{expected_cardinality, generate_synthetic, synthetic_labels, Prototypes, SyntheticPlan, SyntheticSpec};
pub use vocabulary::{Vocabulary, BIGEARTHNET_19};

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use ndarray::{Array2, Array3, Array4, Axis};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unknown class names: {}", .0.join(", "))]
    UnknownClasses(Vec<String>),
    #[error("record `{id}`: cannot resolve {path}")]
    UnresolvablePath { id: String, path: PathBuf },
    #[error("cannot cover classes with the requested fraction: {}", .0.join(", "))]
    Uncoverable(Vec<String>),
    #[error("malformed patch file {path}: {reason}")]
    MalformedPatch { path: PathBuf, reason: String },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A `C x H x W` image patch.
pub type Image = Array3<f32>;

/// Patch pixels, either held in memory or read from disk on first access.
#[derive(Debug, Clone)]
pub struct Patch(Arc<PatchInner>);

#[derive(Debug)]
enum PatchInner {
    Memory(Image),
    Lazy { path: PathBuf, cell: OnceLock<Image> },
}

impl Patch {
    pub fn in_memory(image: Image) -> Self {
        Self(Arc::new(PatchInner::Memory(image)))
    }

    pub fn lazy(path: PathBuf) -> Self {
        Self(Arc::new(PatchInner::Lazy {
            path,
            cell: OnceLock::new(),
        }))
    }

    pub fn is_loaded(&self) -> bool {
        match &*self.0 {
            PatchInner::Memory(_) => true,
            PatchInner::Lazy { cell, .. } => cell.get().is_some(),
        }
    }

    pub fn get(&self) -> Result<&Image> {
        match &*self.0 {
            PatchInner::Memory(img) => Ok(img),
            PatchInner::Lazy { path, cell } => {
                if let Some(img) = cell.get() {
                    return Ok(img);
                }
                let img = read_patch(path)?;
                Ok(cell.get_or_init(|| img))
            }
        }
    }
}

/// One geo-located training unit: co-registered S1 and S2 patches and their
/// shared label vector.
#[derive(Debug, Clone)]
pub struct MultiModalSample {
    pub id: String,
    pub s1: Patch,
    pub s2: Patch,
    pub labels: Vec<u8>,
    pub geokey: String,
}

/// An ordered collection of samples over a fixed label vocabulary.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<MultiModalSample>,
    pub vocabulary: Vocabulary,
}

impl Dataset {
    pub fn new(samples: Vec<MultiModalSample>, vocabulary: Vocabulary) -> Result<Self> {
        let l = vocabulary.len();
        if let Some(s) = samples.iter().find(|s| s.labels.len() != l) {
            return Err(DataError::Validation(format!(
                "sample `{}` has {} labels, vocabulary has {l}",
                s.id,
                s.labels.len()
            )));
        }
        Ok(Self { samples, vocabulary })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.vocabulary.len()
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            vocabulary: self.vocabulary.clone(),
        }
    }

    pub fn label_matrix(&self) -> Array2<u8> {
        let l = self.num_labels();
        let mut m = Array2::zeros((self.len(), l));
        for (mut row, s) in m.outer_iter_mut().zip(&self.samples) {
            for (dst, src) in row.iter_mut().zip(&s.labels) {
                *dst = *src;
            }
        }
        m
    }

    /// Positive count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_labels()];
        for s in &self.samples {
            for (c, v) in counts.iter_mut().zip(&s.labels) {
                *c += usize::from(*v);
            }
        }
        counts
    }

    pub fn label_cardinality(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.class_counts().iter().sum::<usize>() as f64 / self.len() as f64
    }

    /// Deterministic split into `(train, held_out)`; the held-out part takes
    /// `round(fraction * N)` samples chosen by `seed`.
    pub fn split(&self, fraction: f64, seed: u64) -> (Self, Self) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let held = ((self.len() as f64) * fraction).round() as usize;
        let mut held_idx = idx[..held].to_vec();
        let mut train_idx = idx[held..].to_vec();
        held_idx.sort_unstable();
        train_idx.sort_unstable();
        (self.subset(&train_idx), self.subset(&held_idx))
    }

    /// Stacks one modality of `indices` into an `N x C x H x W` tensor.
    pub fn stack(&self, indices: &[usize], modality: crate::model::Modality) -> Result<Array4<f32>> {
        let images = indices
            .iter()
            .map(|&i| {
                let s = &self.samples[i];
                match modality {
                    crate::model::Modality::S1 => s.s1.get(),
                    crate::model::Modality::S2 => s.s2.get(),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        stack_images(&images)
    }
}

pub fn stack_images(images: &[&Image]) -> Result<Array4<f32>> {
    let views: Vec<_> = images.iter().map(|i| i.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| DataError::Validation(format!("cannot stack patches: {e}")))
}

/// Random pixel spectra per class from one modality. A multi-label sample
/// contributes its pixels to every active class. Each class gets up to
/// `per_class` vectors, drawn uniformly over (sample, pixel) pairs.
pub fn sample_class_pixels(
    dataset: &Dataset,
    modality: crate::model::Modality,
    per_class: usize,
    seed: u64,
) -> Result<Vec<(String, Array2<f64>)>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(dataset.num_labels());
    for (c, name) in dataset.vocabulary.names().iter().enumerate() {
        let members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples[i].labels[c] == 1).collect();
        if members.is_empty() {
            out.push((name.clone(), Array2::zeros((0, 0))));
            continue;
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(per_class);
        for _ in 0..per_class {
            let s = &dataset.samples[members[rng.random_range(0..members.len())]];
            let img = match modality {
                crate::model::Modality::S1 => s.s1.get()?,
                crate::model::Modality::S2 => s.s2.get()?,
            };
            let (ch, h, w) = img.dim();
            let (y, x) = (rng.random_range(0..h), rng.random_range(0..w));
            rows.push((0..ch).map(|k| f64::from(img[[k, y, x]])).collect());
        }
        let bands = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        out.push((name.clone(), Array2::from_shape_vec((per_class, bands), flat).expect("consistent bands")));
    }
    Ok(out)
}
