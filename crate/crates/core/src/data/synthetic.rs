//! Desk-scale co-registered multi-label generator.
//!
//! A patch is a land-cover mosaic: every active class owns a few Voronoi
//! cells. S1 and S2 share the label set and the per-class amplitudes, while
//! cell geometry and texture phase are drawn per modality, so the only
//! thing the two views agree on is the land cover itself. Inside a cell of class `c` a pixel is
//!
//! ```text
//! x[ch, y, x] = a_c * s * w_c(y, x) * u_c[ch] + offset[ch] + noise
//! ```
//!
//! where `u_c` is the class prototype of the modality, `a_c` a per-sample
//! amplitude shared by both modalities, `s` a signal scale calibrated to the
//! requested class similarity, `w_c` a unit-mean plane-wave texture whose
//! radial frequency is unique to the class, `offset` a per-sample nuisance
//! drawn independently for S1 and S2, and `noise` white. The nuisance
//! carries no label information and is not shared across modalities.
//!
//! With `noise_sigma == 0` all per-sample variation (amplitudes, texture
//! phase, offsets) is switched off, so single-label samples of one class
//! render identically.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{geokey, DataError, Dataset, MultiModalSample, Patch, Result, Vocabulary};

/// Per-class spectra: `s1[c]` has one entry per S1 channel, `s2[c]` per S2 channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototypes {
    pub s1: Vec<Vec<f64>>,
    pub s2: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_labels: usize,
    /// Drawn from `seed` when absent.
    pub prototypes: Option<Prototypes>,
    /// Mean off-diagonal `1 / (1 + distance)` between S2 class means.
    pub class_similarity_target: f64,
    pub noise_sigma: f64,
    /// Per-sample channel offset, as a multiple of `noise_sigma`.
    pub nuisance_scale: f64,
    pub label_cardinality: f64,
    /// Explicit per-class Bernoulli rates; overrides `label_cardinality`.
    pub class_rates: Option<Vec<f64>>,
    /// S1 class-signal strength relative to S2.
    pub s1_informativeness: f64,
    /// Class pairs whose prototypes are made nearly identical.
    pub near_duplicates: Vec<[usize; 2]>,
    pub texture_amplitude: f64,
    /// Voronoi cells per active class.
    pub cells_per_class: usize,
    pub s1_channels: usize,
    pub s2_channels: usize,
    pub height: usize,
    pub width: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_labels: 8,
            prototypes: None,
            class_similarity_target: 0.6,
            noise_sigma: 0.1,
            nuisance_scale: 3.0,
            label_cardinality: 1.8,
            class_rates: None,
            s1_informativeness: 1.0,
            near_duplicates: Vec::new(),
            texture_amplitude: 0.5,
            cells_per_class: 2,
            s1_channels: 2,
            s2_channels: 4,
            height: 32,
            width: 32,
            size: 2000,
            seed: 0,
        }
    }
}

const RATE_DECAY: f64 = 0.75;
const MAX_RATE: f64 = 0.95;
const NEAR_DUPLICATE_JITTER: f64 = 0.02;
/// Label-set enumeration for calibration is exact up to this many classes.
pub const MAX_SYNTHETIC_LABELS: usize = 20;

/// Everything the renderer needs, resolved from a spec.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticPlan {
    pub prototypes: Prototypes,
    pub class_rates: Vec<f64>,
    pub signal_scale: f64,
    /// `(fy, fx)` cycles per patch for each class texture.
    pub frequencies: Vec<(i32, i32)>,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DataError::Validation(m));
        let l = self.num_labels;
        if !(2..=MAX_SYNTHETIC_LABELS).contains(&l) {
            return fail(format!("label count must lie in [2, {MAX_SYNTHETIC_LABELS}], got {l}"));
        }
        if !(self.class_similarity_target > 0.0 && self.class_similarity_target < 1.0) {
            return fail(format!(
                "class similarity target must lie in (0, 1), got {}",
                self.class_similarity_target
            ));
        }
        if self.size < l {
            return fail(format!("size {} is smaller than the label count {l}", self.size));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("nuisance_scale", self.nuisance_scale),
            ("s1_informativeness", self.s1_informativeness),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.texture_amplitude) {
            return fail("texture amplitude must lie in [0, 1)".into());
        }
        if self.cells_per_class == 0 {
            return fail("cells_per_class must be positive".into());
        }
        if self.s1_channels == 0 || self.s2_channels == 0 || self.height < 8 || self.width < 8 {
            return fail("patches need at least one channel and 8x8 pixels".into());
        }
        match &self.class_rates {
            Some(r) => {
                if r.len() != l || r.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
                    return fail(format!("class rates must be {l} values in (0, 1)"));
                }
            }
            None => {
                let max_card = MAX_RATE * l as f64;
                if !(self.label_cardinality > 1.0 && self.label_cardinality < max_card) {
                    return fail(format!(
                        "label cardinality must lie in (1, {max_card:.2}), got {}",
                        self.label_cardinality
                    ));
                }
            }
        }
        if let Some(p) = &self.prototypes {
            let ok = |set: &Vec<Vec<f64>>, ch: usize| set.len() == l && set.iter().all(|v| v.len() == ch);
            if !ok(&p.s1, self.s1_channels) || !ok(&p.s2, self.s2_channels) {
                return fail("prototype shapes do not match label and channel counts".into());
            }
        }
        for &[a, b] in &self.near_duplicates {
            if a >= l || b >= l || a == b {
                return fail(format!("invalid near-duplicate pair ({a}, {b})"));
            }
        }
        Ok(())
    }

    pub fn plan(&self) -> Result<SyntheticPlan> {
        self.validate()?;
        let l = self.num_labels;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0f_c1a55);
        let mut prototypes = match &self.prototypes {
            Some(p) => p.clone(),
            None => Prototypes {
                s1: (0..l).map(|_| random_unit(&mut rng, self.s1_channels)).collect(),
                s2: (0..l).map(|_| random_unit(&mut rng, self.s2_channels)).collect(),
            },
        };
        for &[a, b] in &self.near_duplicates {
            for set in [&mut prototypes.s1, &mut prototypes.s2] {
                let base = set[a].clone();
                set[b] = base
                    .iter()
                    .map(|v| v + NEAR_DUPLICATE_JITTER * rng.sample::<f64, _>(StandardNormal))
                    .collect();
            }
        }
        let class_rates = match &self.class_rates {
            Some(r) => r.clone(),
            None => calibrate_rates(l, self.label_cardinality),
        };
        let signal_scale = calibrate_scale(&prototypes.s2, &class_rates, self.class_similarity_target)?;
        Ok(SyntheticPlan {
            prototypes,
            class_rates,
            signal_scale,
            frequencies: texture_frequencies(l),
        })
    }
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Expected labels per sample given independent rates and all-zero rejection.
pub fn expected_cardinality(rates: &[f64]) -> f64 {
    let none: f64 = rates.iter().map(|p| 1.0 - p).product();
    rates.iter().sum::<f64>() / (1.0 - none)
}

/// Geometrically decaying rates `min(r * decay^c, MAX_RATE)` with `r` chosen
/// by bisection to hit the requested cardinality.
fn calibrate_rates(l: usize, cardinality: f64) -> Vec<f64> {
    let rates = |r: f64| -> Vec<f64> {
        (0..l).map(|c| (r * RATE_DECAY.powi(c as i32)).min(MAX_RATE)).collect()
    };
    let (mut lo, mut hi) = (1e-9, MAX_RATE / RATE_DECAY.powi(l as i32 - 1));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_cardinality(&rates(mid)) < cardinality {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    rates(0.5 * (lo + hi))
}

/// `share[c][c']`: expected fraction of a class-`c` sample's area covered by
/// class `c'`. Cells are split evenly among active classes, so given the
/// active set `A` each member covers `1 / |A|` in expectation. Exact sum over
/// all label sets containing `c`.
fn area_shares(rates: &[f64]) -> Vec<Vec<f64>> {
    let l = rates.len();
    let mut share = vec![vec![0.0; l]; l];
    for set in 1u32..(1 << l) {
        let k = set.count_ones() as f64;
        let p: f64 = (0..l)
            .map(|c| if set >> c & 1 == 1 { rates[c] } else { 1.0 - rates[c] })
            .product();
        for c in (0..l).filter(|c| set >> c & 1 == 1) {
            // P(set | c active) = p / rates[c].
            let w = p / rates[c] / k;
            for c2 in (0..l).filter(|c2| set >> c2 & 1 == 1) {
                share[c][c2] += w;
            }
        }
    }
    share
}

/// Distances between expected class-mean spectra per unit signal scale.
fn unit_distances(protos: &[Vec<f64>], rates: &[f64]) -> Vec<f64> {
    let l = protos.len();
    let share = area_shares(rates);
    let bands = protos[0].len();
    let means: Vec<Vec<f64>> = (0..l)
        .map(|c| {
            (0..bands)
                .map(|b| (0..l).map(|c2| share[c][c2] * protos[c2][b]).sum())
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(l * (l - 1));
    for a in 0..l {
        for b in (0..l).filter(|b| *b != a) {
            let d2: f64 = means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum();
            out.push(d2.sqrt());
        }
    }
    out
}

fn calibrate_scale(protos: &[Vec<f64>], rates: &[f64], target: f64) -> Result<f64> {
    let dists = unit_distances(protos, rates);
    let mean_sim = |s: f64| dists.iter().map(|d| 1.0 / (1.0 + s * d)).sum::<f64>() / dists.len() as f64;
    let mut hi = 1.0;
    while mean_sim(hi) > target {
        hi *= 2.0;
        if hi > 1e9 {
            return Err(DataError::Validation(format!(
                "class similarity target {target} is unreachable with these prototypes"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_sim(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Integer wave vectors with pairwise distinct lengths of at least two
/// cycles per patch, so right-angle rotations never map one class texture
/// onto another.
fn texture_frequencies(l: usize) -> Vec<(i32, i32)> {
    let mut seen = std::collections::BTreeMap::new();
    for fy in 0..16i32 {
        for fx in 0..=fy {
            let r2 = fy * fy + fx * fx;
            if r2 >= 4 {
                seen.entry(r2).or_insert((fy, fx));
            }
        }
    }
    seen.into_values().take(l).collect()
}

/// Draws the label matrix alone; the full generator uses the same stream.
pub fn synthetic_labels(spec: &SyntheticSpec) -> Result<Array2<u8>> {
    let plan = spec.plan()?;
    Ok(draw_labels(&plan.class_rates, spec.size, spec.seed))
}

fn draw_labels(rates: &[f64], n: usize, seed: u64) -> Array2<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = rates.len();
    let mut y = Array2::zeros((n, l));
    for mut row in y.outer_iter_mut() {
        loop {
            for (v, p) in row.iter_mut().zip(rates) {
                *v = u8::from(rng.random_bool(*p));
            }
            if row.iter().any(|v| *v == 1) {
                break;
            }
        }
    }
    y
}

/// Per-sample, per-modality rendering state.
struct Layout {
    /// Class owning each pixel.
    owner: Array2<usize>,
    /// Amplitude per class (1 for inactive classes).
    amplitude: Vec<f64>,
    /// Texture per class, evaluated on the pixel grid.
    textures: Vec<Option<Array2<f64>>>,
}

fn layout(spec: &SyntheticSpec, plan: &SyntheticPlan, active: &[usize], rng: &mut ChaCha8Rng) -> Layout {
    let (h, w) = (spec.height, spec.width);
    let noisy = spec.noise_sigma > 0.0;
    let seeds: Vec<(f64, f64, usize)> = active
        .iter()
        .flat_map(|&c| std::iter::repeat_n(c, spec.cells_per_class))
        .map(|c| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), c))
        .collect();
    let owner = Array2::from_shape_fn((h, w), |(y, x)| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        seeds
            .iter()
            .min_by(|a, b| {
                let da = (a.0 - py).powi(2) + (a.1 - px).powi(2);
                let db = (b.0 - py).powi(2) + (b.1 - px).powi(2);
                da.total_cmp(&db)
            })
            .expect("at least one active class")
            .2
    });
    let mut amplitude = vec![1.0; spec.num_labels];
    let mut textures = vec![None; spec.num_labels];
    for &c in active {
        let a = rng.random_range(0.5..1.5);
        let shift = (rng.random_range(0..h), rng.random_range(0..w));
        if noisy {
            amplitude[c] = a;
        }
        textures[c] = Some(texture(plan.frequencies[c], if noisy { shift } else { (0, 0) }, spec));
    }
    Layout {
        owner,
        amplitude,
        textures,
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let plan = spec.plan()?;
    let labels = draw_labels(&plan.class_rates, spec.size, spec.seed);
    let mut samples = Vec::with_capacity(spec.size);
    for (i, row) in labels.outer_iter().enumerate() {
        let active: Vec<usize> = row.iter().enumerate().filter(|(_, v)| **v == 1).map(|(c, _)| c).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        let lay = layout(spec, &plan, &active, &mut rng);
        let s2 = render(spec, &plan.prototypes.s2, plan.signal_scale, &lay, &mut rng);
        let mut lay1 = layout(spec, &plan, &active, &mut rng);
        lay1.amplitude.clone_from(&lay.amplitude);
        let s1 = render(
            spec,
            &plan.prototypes.s1,
            plan.signal_scale * spec.s1_informativeness,
            &lay1,
            &mut rng,
        );
        let lat = 40.0 + (i / 1000) as f64 * 0.1 + (i % 1000) as f64 * 1e-4;
        let lon = 10.0 + (spec.seed % 1000) as f64 * 0.01;
        samples.push(MultiModalSample {
            id: format!("syn{:04}-{i:06}", spec.seed % 10_000),
            s1: Patch::in_memory(s1),
            s2: Patch::in_memory(s2),
            labels: row.to_vec(),
            geokey: geokey(lat, lon),
        });
    }
    Dataset::new(samples, Vocabulary::numbered(spec.num_labels))
}

/// Unit-mean plane wave `1 + A sin(2 pi (fy y / H + fx x / W))`.
fn texture(freq: (i32, i32), shift: (usize, usize), spec: &SyntheticSpec) -> Array2<f64> {
    let (fy, fx) = (freq.0 as f64, freq.1 as f64);
    let (h, w) = (spec.height as f64, spec.width as f64);
    Array2::from_shape_fn((spec.height, spec.width), |(y, x)| {
        let yy = (y + shift.0) as f64;
        let xx = (x + shift.1) as f64;
        1.0 + spec.texture_amplitude * (std::f64::consts::TAU * (fy * yy / h + fx * xx / w)).sin()
    })
}

fn render(spec: &SyntheticSpec, protos: &[Vec<f64>], scale: f64, lay: &Layout, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let channels = protos[0].len();
    let nuisance_sigma = spec.noise_sigma * spec.nuisance_scale;
    let offsets: Vec<f64> = (0..channels)
        .map(|_| nuisance_sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    Array3::from_shape_fn((channels, spec.height, spec.width), |(ch, y, x)| {
        let c = lay.owner[[y, x]];
        let t = lay.textures[c].as_ref().expect("owner is active")[[y, x]];
        let mut v = offsets[ch] + lay.amplitude[c] * scale * t * protos[c][ch];
        if spec.noise_sigma > 0.0 {
            v += noise.sample(rng);
        }
        v as f32
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            size: 60,
            height: 8,
            width: 8,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.labels, y.labels);
            assert_eq!(x.s1.get().unwrap(), y.s1.get().unwrap());
            assert_eq!(x.s2.get().unwrap(), y.s2.get().unwrap());
            assert_eq!(x.geokey, y.geokey);
        }
    }

    #[test]
    fn no_empty_label_sets_and_unique_geokeys() {
        let ds = generate_synthetic(&small()).unwrap();
        assert!(ds.samples.iter().all(|s| s.labels.contains(&1)));
        let keys: std::collections::HashSet<_> = ds.samples.iter().map(|s| &s.geokey).collect();
        assert_eq!(keys.len(), ds.len());
    }

    #[test]
    fn noiseless_single_label_patches_coincide() {
        let ds = generate_synthetic(&SyntheticSpec {
            noise_sigma: 0.0,
            size: 300,
            ..small()
        })
        .unwrap();
        let singles: Vec<_> = ds
            .samples
            .iter()
            .filter(|s| s.labels.iter().map(|v| usize::from(*v)).sum::<usize>() == 1 && s.labels[0] == 1)
            .collect();
        assert!(singles.len() >= 2);
        for s in &singles[1..] {
            assert_eq!(s.s2.get().unwrap(), singles[0].s2.get().unwrap());
        }
    }

    #[test]
    fn rates_hit_cardinality() {
        let rates = calibrate_rates(8, 1.8);
        assert!((expected_cardinality(&rates) - 1.8).abs() < 1e-9);
        assert!(rates.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn area_shares_are_distributions() {
        let share = area_shares(&[0.5, 0.3, 0.2]);
        for row in &share {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // Class 0 alone with probability (1 - 0.3)(1 - 0.2) = 0.56.
        let own = 0.56 + 0.5 * (0.3 * 0.8 + 0.7 * 0.2) + 0.06 / 3.0;
        assert!((share[0][0] - own).abs() < 1e-12);
    }

    #[test]
    fn textures_have_unit_mean_and_distinct_radii() {
        let spec = small();
        let f = texture_frequencies(19);
        assert_eq!(f.len(), 19);
        let mut r: Vec<_> = f.iter().map(|(a, b)| a * a + b * b).collect();
        r.dedup();
        assert_eq!(r.len(), 19);
        for &freq in &f[..4] {
            let t = texture(freq, (3, 5), &spec);
            assert!((t.mean().unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        for spec in [
            SyntheticSpec {
                class_similarity_target: 1.0,
                ..small()
            },
            SyntheticSpec {
                size: 3,
                ..small()
            },
            SyntheticSpec {
                label_cardinality: 0.5,
                ..small()
            },
        ] {
            assert!(matches!(generate_synthetic(&spec), Err(DataError::Validation(_))));
        }
    }
}
