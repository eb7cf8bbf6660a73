use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array4;

use super::{Result, TrainError};
use crate::data::{augment, stack_images, AugmentPolicy, Dataset, Image};
use crate::losses::LabelMatrix;
use crate::model::Modality;

/// Two augmented views of one modality, each `N x C x H x W`.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub first: Array4<f32>,
    pub second: Array4<f32>,
}

/// One optimization batch. Label access is counted so callers can verify
/// that self-supervised steps never read labels.
#[derive(Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub s1: Option<Array4<f32>>,
    pub s2: Option<Array4<f32>>,
    pub s1_views: Option<ViewPair>,
    pub s2_views: Option<ViewPair>,
    labels: Option<LabelMatrix>,
    label_reads: AtomicUsize,
}

/// What a batch must carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BatchNeeds {
    pub clean: bool,
    pub s1_views: bool,
    pub s2_views: bool,
    pub labels: bool,
}

impl Batch {
    pub fn new(ids: Vec<String>, labels: Option<LabelMatrix>) -> Self {
        Self {
            ids,
            s1: None,
            s2: None,
            s1_views: None,
            s2_views: None,
            labels,
            label_reads: AtomicUsize::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.is_some()
    }

    /// Ground-truth labels; every call is counted.
    pub fn labels(&self) -> Option<&LabelMatrix> {
        self.label_reads.fetch_add(1, Ordering::Relaxed);
        self.labels.as_ref()
    }

    pub fn label_reads(&self) -> usize {
        self.label_reads.load(Ordering::Relaxed)
    }

    pub fn clean(&self, m: Modality) -> Option<&Array4<f32>> {
        match m {
            Modality::S1 => self.s1.as_ref(),
            Modality::S2 => self.s2.as_ref(),
        }
    }

    pub fn views(&self, m: Modality) -> Option<&ViewPair> {
        match m {
            Modality::S1 => self.s1_views.as_ref(),
            Modality::S2 => self.s2_views.as_ref(),
        }
    }

    /// Assembles samples `indices` of `dataset`. Augmentation seeds are a
    /// pure function of `(seed, sample id position, modality, view)`.
    pub fn assemble(
        dataset: &Dataset,
        indices: &[usize],
        needs: BatchNeeds,
        policy: &AugmentPolicy,
        seed: u64,
    ) -> Result<Self> {
        let ids = indices.iter().map(|&i| dataset.samples[i].id.clone()).collect();
        let labels = if needs.labels {
            let rows: Vec<Vec<u8>> = indices.iter().map(|&i| dataset.samples[i].labels.clone()).collect();
            Some(LabelMatrix::from_rows(&rows)?)
        } else {
            None
        };
        let mut batch = Batch::new(ids, labels);
        for m in Modality::BOTH {
            let images = indices
                .iter()
                .map(|&i| {
                    let s = &dataset.samples[i];
                    match m {
                        Modality::S1 => s.s1.get(),
                        Modality::S2 => s.s2.get(),
                    }
                })
                .collect::<std::result::Result<Vec<&Image>, _>>()?;
            if needs.clean {
                let stacked = stack_images(&images)?;
                match m {
                    Modality::S1 => batch.s1 = Some(stacked),
                    Modality::S2 => batch.s2 = Some(stacked),
                }
            }
            let want_views = match m {
                Modality::S1 => needs.s1_views,
                Modality::S2 => needs.s2_views,
            };
            if want_views {
                let view = |v: u64| -> Result<Array4<f32>> {
                    let augmented = images
                        .iter()
                        .zip(indices)
                        .map(|(img, &i)| augment(img, policy, mix(seed, &[i as u64, m as u64, v])))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    let refs: Vec<&Image> = augmented.iter().collect();
                    Ok(stack_images(&refs)?)
                };
                let pair = ViewPair {
                    first: view(0)?,
                    second: view(1)?,
                };
                match m {
                    Modality::S1 => batch.s1_views = Some(pair),
                    Modality::S2 => batch.s2_views = Some(pair),
                }
            }
        }
        if batch.is_empty() {
            return Err(TrainError::Config("empty batch".into()));
        }
        Ok(batch)
    }
}

/// SplitMix64-style seed derivation.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut x = seed;
    for p in parts {
        x ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}
