//! Random geometric augmentation used to build fine-tuning batches from a
//! single test image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageSample;
use crate::error::{Error, Result};

/// Ranges for the random transforms. The default policy draws a shift of up
/// to two pixels and a rotation of up to fifteen degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub max_shift: i32,
    pub max_rotation_deg: f64,
    /// Horizontal flip with probability one half.
    pub hflip: bool,
    /// When set, zoom in on a random crop whose side is this fraction of the
    /// image or larger.
    pub min_crop: Option<f64>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { max_shift: 2, max_rotation_deg: 15.0, hflip: false, min_crop: None }
    }
}

impl AugmentPolicy {
    /// Default shift and rotation plus flips and crops.
    pub fn extended() -> Self {
        Self { hflip: true, min_crop: Some(0.8), ..Self::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub dx: i32,
    pub dy: i32,
    pub angle_deg: f64,
    pub flip: bool,
    /// Crop side as a fraction of the image (1 = no crop) and crop centre
    /// offset in pixels.
    pub crop: f64,
    pub crop_offset: (f64, f64),
}

impl Transform {
    pub const IDENTITY: Transform =
        Transform { dx: 0, dy: 0, angle_deg: 0.0, flip: false, crop: 1.0, crop_offset: (0.0, 0.0) };

    fn draw(policy: &AugmentPolicy, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Self {
        let s = policy.max_shift.max(0);
        let dx = rng.random_range(-s..=s);
        let dy = rng.random_range(-s..=s);
        let a = policy.max_rotation_deg.abs();
        let angle_deg = if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
        let flip = policy.hflip && rng.random_bool(0.5);
        let (crop, crop_offset) = match policy.min_crop {
            Some(m) if m < 1.0 => {
                let c = rng.random_range(m.max(0.1)..=1.0);
                let slack_y = (1.0 - c) * (h as f64 - 1.0) / 2.0;
                let slack_x = (1.0 - c) * (w as f64 - 1.0) / 2.0;
                let oy = if slack_y > 0.0 { rng.random_range(-slack_y..=slack_y) } else { 0.0 };
                let ox = if slack_x > 0.0 { rng.random_range(-slack_x..=slack_x) } else { 0.0 };
                (c, (oy, ox))
            }
            _ => (1.0, (0.0, 0.0)),
        };
        Transform { dx, dy, angle_deg, flip, crop, crop_offset }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// Apply `t` by inverse mapping each output pixel to a source coordinate and
/// sampling bilinearly with edge padding. Output is rounded back to 0..=255.
pub fn transform(x: &ImageSample, t: &Transform) -> ImageSample {
    if t.is_identity() {
        return x.clone();
    }
    let sh = x.shape;
    let (cy, cx) = ((sh.h as f64 - 1.0) / 2.0, (sh.w as f64 - 1.0) / 2.0);
    let (sin, cos) = t.angle_deg.to_radians().sin_cos();
    let mut out = vec![0u8; sh.dims()];
    for i in 0..sh.h {
        for j in 0..sh.w {
            // undo shift
            let (y, xx) = (i as f64 - t.dy as f64 - cy, j as f64 - t.dx as f64 - cx);
            // undo rotation
            let (y, xx) = (cos * y - sin * xx, sin * y + cos * xx);
            // undo crop zoom
            let (y, xx) = (y * t.crop + t.crop_offset.0 + cy, xx * t.crop + t.crop_offset.1 + cx);
            let xx = if t.flip { sh.w as f64 - 1.0 - xx } else { xx };
            for c in 0..sh.c {
                out[(i * sh.w + j) * sh.c + c] = bilinear(x, y, xx, c);
            }
        }
    }
    ImageSample { id: x.id.clone(), shape: sh, pixels: out }
}

fn bilinear(x: &ImageSample, y: f64, xx: f64, c: usize) -> u8 {
    let (h, w) = (x.shape.h as f64 - 1.0, x.shape.w as f64 - 1.0);
    let y = y.clamp(0.0, h);
    let xx = xx.clamp(0.0, w);
    let (y0, x0) = (y.floor(), xx.floor());
    let (fy, fx) = (y - y0, xx - x0);
    let (y0, x0) = (y0 as usize, x0 as usize);
    let y1 = (y0 + 1).min(x.shape.h - 1);
    let x1 = (x0 + 1).min(x.shape.w - 1);
    let p = |i: usize, j: usize| x.at(i, j, c) as f64;
    let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1)) + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
    v.round().clamp(0.0, 255.0) as u8
}

/// `k` images: `x` itself followed by `k - 1` random shift/rotation variants.
pub fn augment_batch(x: &ImageSample, k: usize, seed: u64) -> Result<Vec<ImageSample>> {
    augment_batch_with(x, k, seed, &AugmentPolicy::default())
}

pub fn augment_batch_with(x: &ImageSample, k: usize, seed: u64, policy: &AugmentPolicy) -> Result<Vec<ImageSample>> {
    if k == 0 {
        return Err(Error::precondition("augment_batch needs k >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k);
    out.push(x.clone());
    for _ in 1..k {
        let t = Transform::draw(policy, x.shape.h, x.shape.w, &mut rng);
        out.push(transform(x, &t));
    }
    Ok(out)
}
