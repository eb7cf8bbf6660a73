//! Low-label subsampling that keeps every class represented.
//!
//! Two phases:
//!
//! 1. Cover: classes are visited from rarest to most frequent; any class not
//!    yet represented gets one randomly chosen positive sample.
//! 2. Fill: the remaining quota is drawn one sample at a time, always taking
//!    the label pattern that keeps per-class positive rates closest (squared
//!    error) to the full-set rates. Among samples sharing that pattern the
//!    seed's random order decides, so different seeds give different subsets.
//!
//! The fill keeps every class's positive rate within
//! [`STRATIFICATION_TOLERANCE`] of the full set for the synthetic defaults.

use std::collections::{BTreeMap, HashSet};

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{DataError, Dataset, Result};

/// Documented bound on `|subset rate - full rate|` per class.
pub const STRATIFICATION_TOLERANCE: f64 = 0.05;

/// Draws `round(fraction * N)` samples; returns them in dataset order.
pub fn stratified_subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    let labels = dataset.label_matrix();
    let idx = stratified_indices(labels.view(), dataset.vocabulary.names(), fraction, seed)?;
    Ok((dataset.subset(&idx), idx))
}

pub fn stratified_indices(labels: ArrayView2<u8>, class_names: &[String], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Validation(format!(
            "fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let (n, l) = labels.dim();
    if fraction == 1.0 {
        return Ok((0..n).collect());
    }
    let quota = ((n as f64) * fraction).round() as usize;
    let counts: Vec<usize> = (0..l)
        .map(|c| labels.column(c).iter().map(|v| usize::from(*v)).sum())
        .collect();
    let rates: Vec<f64> = counts.iter().map(|&c| c as f64 / n.max(1) as f64).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut taken = vec![false; n];
    let mut selected = Vec::with_capacity(quota);
    let mut sub_counts = vec![0usize; l];
    let take = |i: usize, taken: &mut Vec<bool>, selected: &mut Vec<usize>, sub_counts: &mut Vec<usize>| {
        taken[i] = true;
        selected.push(i);
        for (c, sc) in sub_counts.iter_mut().enumerate() {
            *sc += usize::from(labels[[i, c]]);
        }
    };

    // Phase 1: cover, rarest class first.
    let mut by_rarity: Vec<usize> = (0..l).filter(|&c| counts[c] > 0).collect();
    by_rarity.sort_by_key(|&c| (counts[c], c));
    let mut overflow = Vec::new();
    for &c in &by_rarity {
        if sub_counts[c] > 0 {
            continue;
        }
        let pick = order
            .iter()
            .copied()
            .find(|&i| !taken[i] && labels[[i, c]] == 1)
            .expect("class has a positive");
        if selected.len() >= quota {
            overflow.push(class_names.get(c).cloned().unwrap_or_else(|| format!("#{c}")));
        }
        take(pick, &mut taken, &mut selected, &mut sub_counts);
    }
    if !overflow.is_empty() {
        return Err(DataError::Uncoverable(overflow));
    }

    // Phase 2: proportional fill over label patterns.
    let mut patterns: BTreeMap<Vec<u8>, Vec<usize>> = BTreeMap::new();
    for &i in &order {
        if !taken[i] {
            patterns.entry(labels.row(i).to_vec()).or_default().push(i);
        }
    }
    // Pattern queues are consumed from the front in shuffled order.
    let mut queues: Vec<(Vec<u8>, std::collections::VecDeque<usize>)> =
        patterns.into_iter().map(|(p, v)| (p, v.into())).collect();
    // Randomise pattern precedence for tie-breaking.
    queues.shuffle(&mut rng);
    while selected.len() < quota {
        let t = (selected.len() + 1) as f64;
        let mut best: Option<(f64, usize)> = None;
        for (qi, (pattern, q)) in queues.iter().enumerate() {
            if q.is_empty() {
                continue;
            }
            let cost: f64 = (0..l)
                .map(|c| {
                    let d = (sub_counts[c] + usize::from(pattern[c])) as f64 - rates[c] * t;
                    d * d
                })
                .sum();
            if best.is_none_or(|(b, _)| cost < b - 1e-12) {
                best = Some((cost, qi));
            }
        }
        let (_, qi) = best.expect("quota never exceeds sample count");
        let i = queues[qi].1.pop_front().expect("non-empty queue");
        take(i, &mut taken, &mut selected, &mut sub_counts);
    }
    selected.sort_unstable();
    Ok(selected)
}

/// Short content hash identifying a subset by its sample ids.
pub fn subset_hash<'a>(ids: impl IntoIterator<Item = &'a str>) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Largest per-class `|subset rate - full rate|`.
pub fn max_rate_deviation(labels: ArrayView2<u8>, subset: &[usize]) -> f64 {
    let (n, l) = labels.dim();
    let mut worst: f64 = 0.0;
    let set: HashSet<usize> = subset.iter().copied().collect();
    for c in 0..l {
        let full = labels.column(c).iter().map(|v| f64::from(*v)).sum::<f64>() / n as f64;
        let sub = set.iter().map(|&i| f64::from(labels[[i, c]])).sum::<f64>() / subset.len() as f64;
        worst = worst.max((full - sub).abs());
    }
    worst
}
