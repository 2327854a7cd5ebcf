//! Training-time augmentation: mirror, scale, rotation and crop applied as a
//! single inverse-mapped affine resampling, then optional Gaussian blur.
//!
//! Labels are sampled with nearest neighbor and images bilinearly from the
//! same source coordinate, so the two stay aligned. Pixels that map outside
//! the source get the ignore label and the fill color.

use dca_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{present_vector, Sample};
use crate::error::{invalid, Result};
use crate::network::IGNORE_INDEX;

pub const SCALE_LIMITS: (f64, f64) = (0.5, 2.0);
pub const ROTATION_LIMIT_DEG: f64 = 10.0;
pub const MAX_BLUR_SIGMA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub mirror: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Rotation angles are drawn from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
    /// Blur with probability 0.5 and sigma drawn from `[0, 1]`.
    pub blur: bool,
    /// Output side; 0 keeps the input size.
    pub crop: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: true, mirror: true, scale_min: 0.5, scale_max: 2.0, rotation_deg: 10.0, blur: true, crop: 0 }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = SCALE_LIMITS;
        if !(lo <= self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= hi) {
            return Err(invalid(format!("scale range must lie within [{lo}, {hi}]")));
        }
        if !(0.0..=ROTATION_LIMIT_DEG).contains(&self.rotation_deg) {
            return Err(invalid(format!("rotation range must lie within [-{ROTATION_LIMIT_DEG}, {ROTATION_LIMIT_DEG}]")));
        }
        Ok(())
    }
}

/// One draw of the random transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub mirror: bool,
    pub scale: f64,
    pub angle_deg: f64,
    /// Top-left corner of the crop in the scaled, rotated canvas; negative
    /// values pad.
    pub offset: (f64, f64),
    pub out_size: (usize, usize),
    pub blur_sigma: Option<f64>,
}

impl AugmentParams {
    pub fn identity(h: usize, w: usize) -> Self {
        Self { mirror: false, scale: 1.0, angle_deg: 0.0, offset: (0.0, 0.0), out_size: (h, w), blur_sigma: None }
    }

    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R, h: usize, w: usize) -> Self {
        let (oh, ow) = if cfg.crop == 0 { (h, w) } else { (cfg.crop, cfg.crop) };
        let mirror = cfg.mirror && rng.random_bool(0.5);
        let scale = if cfg.scale_max > cfg.scale_min { rng.random_range(cfg.scale_min..=cfg.scale_max) } else { cfg.scale_min };
        let angle_deg =
            if cfg.rotation_deg > 0.0 { rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg) } else { 0.0 };
        let (sh, sw) = ((h as f64 * scale).round() as i64, (w as f64 * scale).round() as i64);
        let mut offset_along = |canvas: i64, out: usize| -> f64 {
            let slack = canvas - out as i64;
            let (a, b) = if slack >= 0 { (0, slack) } else { (slack, 0) };
            rng.random_range(a..=b) as f64
        };
        let offset = (offset_along(sh, oh), offset_along(sw, ow));
        let blur_sigma = (cfg.blur && rng.random_bool(0.5)).then(|| rng.random_range(0.0..=MAX_BLUR_SIGMA));
        Self { mirror, scale, angle_deg, offset, out_size: (oh, ow), blur_sigma }
    }
}

/// Maps an output pixel center to continuous source coordinates (pixel `k`
/// spans `[k, k + 1)`).
fn source_coord(p: &AugmentParams, rot: (f64, f64), h: usize, w: usize, y: usize, x: usize) -> (f64, f64) {
    let s = p.scale;
    let (ch, cw) = (h as f64 * s / 2.0, w as f64 * s / 2.0);
    let cy = y as f64 + 0.5 + p.offset.0 - ch;
    let cx = x as f64 + 0.5 + p.offset.1 - cw;
    let (sin, cos) = rot;
    let ry = sin * cx + cos * cy + ch;
    let rx = cos * cx - sin * cy + cw;
    let sy = ry / s;
    let sx = rx / s;
    (sy, if p.mirror { w as f64 - sx } else { sx })
}

/// Applies the geometric part of `p` to an image and its labels, then blurs
/// the image if `p` asks for it. `fill` colors pixels outside the source.
pub fn apply(sample: &Sample, p: &AugmentParams, fill: [f32; 3], num_classes: usize) -> Result<Sample> {
    let (h, w) = (sample.height(), sample.width());
    let (oh, ow) = p.out_size;
    let src = sample.image.data();
    let mut image = vec![0f32; 3 * oh * ow];
    let mut labels = vec![IGNORE_INDEX; oh * ow];
    let rot = (-p.angle_deg.to_radians()).sin_cos();
    for y in 0..oh {
        for x in 0..ow {
            let (sy, sx) = source_coord(p, rot, h, w, y, x);
            let o = y * ow + x;
            if !(0.0..h as f64).contains(&sy) || !(0.0..w as f64).contains(&sx) {
                for c in 0..3 {
                    image[c * oh * ow + o] = fill[c];
                }
                continue;
            }
            labels[o] = sample.labels[sy as usize * w + sx as usize];
            let fy = (sy - 0.5).clamp(0.0, (h - 1) as f64);
            let fx = (sx - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (ty, tx) = ((fy - y0 as f64) as f32, (fx - x0 as f64) as f32);
            for c in 0..3 {
                let at = |yy: usize, xx: usize| src[c * h * w + yy * w + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                image[c * oh * ow + o] = top * (1.0 - ty) + bottom * ty;
            }
        }
    }
    let mut image = Tensor::from_vec(&[3, oh, ow], image)?;
    if let Some(sigma) = p.blur_sigma {
        image = gaussian_blur(&image, sigma);
    }
    let present = present_vector(&labels, num_classes);
    Ok(Sample { image, labels, present })
}

pub fn augment<R: Rng>(sample: &Sample, cfg: &AugmentConfig, rng: &mut R, fill: [f32; 3], num_classes: usize) -> Result<Sample> {
    if !cfg.enabled {
        return Ok(sample.clone());
    }
    let p = AugmentParams::sample(cfg, rng, sample.height(), sample.width());
    apply(sample, &p, fill, num_classes)
}

/// Horizontal flip of image and labels.
pub fn mirror(sample: &Sample) -> Sample {
    let (h, w) = (sample.height(), sample.width());
    let mut image = sample.image.clone();
    let mut labels = sample.labels.clone();
    for y in 0..h {
        labels[y * w..(y + 1) * w].reverse();
        for c in 0..3 {
            image.data_mut()[c * h * w + y * w..c * h * w + (y + 1) * w].reverse();
        }
    }
    Sample { image, labels, present: sample.present.clone() }
}

/// Separable Gaussian blur with a `ceil(3 sigma)` radius and clamped borders.
pub fn gaussian_blur(image: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    if sigma < 1e-3 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut tmp = vec![0f32; src.len()];
    let mut out = vec![0f32; src.len()];
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * src[base + y * w + clamp(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, &kv)| kv * tmp[base + clamp(y as isize + k as isize - radius, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::from_vec(s, out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> Sample {
        let image = Tensor::from_fn(&[3, h, w], |i| (i % 97) as f32 / 97.0);
        let labels: Vec<u8> = (0..h * w).map(|i| (i % 3) as u8).collect();
        let present = present_vector(&labels, 3);
        Sample { image, labels, present }
    }

    #[test]
    fn identity_params_reproduce_the_sample() {
        let s = ramp(9, 7);
        let out = apply(&s, &AugmentParams::identity(9, 7), [0.0; 3], 3).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn resampled_mirror_matches_direct_flip() {
        let s = ramp(6, 8);
        let p = AugmentParams { mirror: true, ..AugmentParams::identity(6, 8) };
        let out = apply(&s, &p, [0.0; 3], 3).unwrap();
        assert_eq!(out, mirror(&s));
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Tensor::full(&[3, 5, 6], 0.25f32);
        let b = gaussian_blur(&img, 0.8);
        assert!(b.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn sampled_params_respect_limits() {
        let cfg = AugmentConfig { crop: 48, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p = AugmentParams::sample(&cfg, &mut rng, 64, 64);
            assert!((0.5..=2.0).contains(&p.scale));
            assert!((-10.0..=10.0).contains(&p.angle_deg));
            assert!(p.blur_sigma.is_none_or(|s| (0.0..=1.0).contains(&s)));
            assert_eq!(p.out_size, (48, 48));
        }
    }

    #[test]
    fn out_of_range_config_is_rejected() {
        assert!(AugmentConfig { scale_max: 2.5, ..AugmentConfig::default() }.validate().is_err());
        assert!(AugmentConfig { rotation_deg: 12.0, ..AugmentConfig::default() }.validate().is_err());
    }
}
