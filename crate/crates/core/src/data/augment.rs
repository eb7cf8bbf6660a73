use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Image, Result};

/// View-generation transforms, applied in order: random resized crop,
/// right-angle rotation, Gaussian blur.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub enabled: bool,
    /// Crop area as a fraction of the patch area, sampled uniformly.
    pub crop_scale: [f64; 2],
    /// Rotate by a uniformly chosen multiple of 90 degrees.
    pub rotate: bool,
    pub blur_sigma: [f64; 2],
    pub blur_probability: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            crop_scale: [0.8, 1.0],
            rotate: true,
            blur_sigma: [0.1, 1.0],
            blur_probability: 0.5,
        }
    }
}

const MIN_CROP_SIDE: usize = 2;

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(DataError::Validation(format!(
                "crop scale range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
            )));
        }
        let [slo, shi] = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return Err(DataError::Validation(format!(
                "blur sigma range must satisfy 0 < lo <= hi, got [{slo}, {shi}]"
            )));
        }
        if !(0.0..=1.0).contains(&self.blur_probability) {
            return Err(DataError::Validation("blur probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Applies `policy` to a `C x H x W` patch; deterministic in `seed`.
/// The output has the input's shape.
pub fn augment(patch: &Image, policy: &AugmentPolicy, seed: u64) -> Result<Image> {
    if !policy.enabled {
        return Ok(patch.clone());
    }
    policy.validate()?;
    let (_, h, w) = patch.dim();
    let min_side = ((policy.crop_scale[0].sqrt() * h.min(w) as f64).round()) as usize;
    if min_side < MIN_CROP_SIDE {
        return Err(DataError::Validation(format!(
            "patch {h}x{w} is too small for crop scale {}",
            policy.crop_scale[0]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let scale = rng.random_range(policy.crop_scale[0]..=policy.crop_scale[1]);
    let ch = ((scale.sqrt() * h as f64).round() as usize).clamp(1, h);
    let cw = ((scale.sqrt() * w as f64).round() as usize).clamp(1, w);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    let cropped = patch.slice(s![.., top..top + ch, left..left + cw]).to_owned();
    let mut out = resize_bilinear(&cropped, h, w);

    if policy.rotate {
        let quarter_turns = if h == w { rng.random_range(0..4) } else { 2 * rng.random_range(0..2) };
        out = rotate90(&out, quarter_turns);
    }

    let sigma = rng.random_range(policy.blur_sigma[0]..=policy.blur_sigma[1]);
    if rng.random_bool(policy.blur_probability) {
        out = gaussian_blur(&out, sigma);
    }
    Ok(out)
}

/// Bilinear resampling with pixel-centre alignment.
fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (c, h, w) = img.dim();
    if h == out_h && w == out_w {
        return img.clone();
    }
    let mut out = Array3::zeros((c, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = (fy - y0 as f64) as f32;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = (fx - x0 as f64) as f32;
            for ch in 0..c {
                let top = img[[ch, y0, x0]] * (1.0 - wx) + img[[ch, y0, x1]] * wx;
                let bot = img[[ch, y1, x0]] * (1.0 - wx) + img[[ch, y1, x1]] * wx;
                out[[ch, oy, ox]] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

/// Counter-clockwise rotation by `quarter_turns * 90` degrees.
fn rotate90(img: &Image, quarter_turns: usize) -> Image {
    let (c, h, w) = img.dim();
    match quarter_turns % 4 {
        0 => img.clone(),
        1 => Array3::from_shape_fn((c, w, h), |(ch, y, x)| img[[ch, x, w - 1 - y]]),
        2 => Array3::from_shape_fn((c, h, w), |(ch, y, x)| img[[ch, h - 1 - y, w - 1 - x]]),
        _ => Array3::from_shape_fn((c, w, h), |(ch, y, x)| img[[ch, h - 1 - x, y]]),
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Separable Gaussian blur with mirrored borders.
fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (c, h, w) = img.dim();
    let mut tmp = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let xi = reflect(x as isize + k as isize - radius, w);
                    acc += kv * img[[ch, y, xi]];
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let yi = reflect(y as isize + k as isize - radius, h);
                    acc += kv * tmp[[ch, yi, x]];
                }
                out[[ch, y, x]] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(c: usize, h: usize, w: usize) -> Image {
        Array3::from_shape_fn((c, h, w), |(a, b, d)| ((a * 31 + b * 7 + d * 3) % 17) as f32 / 17.0)
    }

    #[test]
    fn disabled_policy_is_identity() {
        let img = sample(4, 16, 16);
        assert_eq!(augment(&img, &AugmentPolicy::disabled(), 3).unwrap(), img);
    }

    #[test]
    fn same_seed_same_output() {
        let img = sample(2, 32, 32);
        let p = AugmentPolicy::default();
        assert_eq!(augment(&img, &p, 11).unwrap(), augment(&img, &p, 11).unwrap());
        let differs = (0..8).any(|s| augment(&img, &p, s).unwrap() != augment(&img, &p, 11).unwrap());
        assert!(differs);
    }

    #[test]
    fn shape_is_preserved() {
        let p = AugmentPolicy::default();
        for (h, w) in [(32, 32), (16, 24), (9, 9)] {
            let img = sample(3, h, w);
            for seed in 0..10 {
                assert_eq!(augment(&img, &p, seed).unwrap().dim(), (3, h, w));
            }
        }
    }

    #[test]
    fn rotations_compose_to_identity() {
        let img = sample(2, 5, 5);
        let mut r = img.clone();
        for _ in 0..4 {
            r = rotate90(&r, 1);
        }
        assert_eq!(r, img);
        assert_eq!(rotate90(&rotate90(&img, 1), 3), img);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Array3::from_elem((1, 6, 6), 0.3f32);
        let b = gaussian_blur(&img, 0.8);
        assert!(b.iter().all(|v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn degenerate_crop_config_is_rejected() {
        let img = sample(1, 8, 8);
        let p = AugmentPolicy {
            crop_scale: [0.0, 1.0],
            ..AugmentPolicy::default()
        };
        assert!(matches!(augment(&img, &p, 0), Err(DataError::Validation(_))));
        let p = AugmentPolicy {
            crop_scale: [0.01, 0.02],
            ..AugmentPolicy::default()
        };
        assert!(matches!(augment(&img, &p, 0), Err(DataError::Validation(_))));
    }
}
