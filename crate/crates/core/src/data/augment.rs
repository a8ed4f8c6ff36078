//! Flips, random crop-and-resize, brightness/contrast jitter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{resize_pair, Sample};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Minimum crop area as a fraction of the image; 1 disables cropping.
    pub crop_min_area: f64,
    /// Contrast factor range for `a·x + b`.
    pub contrast: (f64, f64),
    /// Brightness offset range for `a·x + b`.
    pub brightness: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy { hflip_p: 0.5, vflip_p: 0.5, crop_min_area: 0.8, contrast: (0.8, 1.2), brightness: (-0.1, 0.1) }
    }
}

impl AugmentPolicy {
    /// No-op policy.
    pub fn none() -> Self {
        AugmentPolicy { hflip_p: 0.0, vflip_p: 0.0, crop_min_area: 1.0, contrast: (1.0, 1.0), brightness: (0.0, 0.0) }
    }
}

/// Mirrors every map of a `(N, C, H, W)` tensor left-right.
pub fn flip_horizontal(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.shape().w;
    Tensor::from_fn(t.shape(), |[n, c, y, x]| t.at(n, c, y, w - 1 - x))
}

pub fn flip_vertical(t: &Tensor<f32>) -> Tensor<f32> {
    let h = t.shape().h;
    Tensor::from_fn(t.shape(), |[n, c, y, x]| t.at(n, c, h - 1 - y, x))
}

/// Square window `side × side` at `(top, left)`.
pub fn crop(t: &Tensor<f32>, top: usize, left: usize, side: usize) -> Tensor<f32> {
    let mut s = t.shape();
    s.h = side;
    s.w = side;
    Tensor::from_fn(s, |[n, c, y, x]| t.at(n, c, top + y, left + x))
}

fn range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// One random augmentation. Geometric steps act on image and mask alike;
/// jitter touches only the image.
pub fn augment(sample: &Sample, rng: &mut impl Rng, policy: &AugmentPolicy) -> Sample {
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if rng.random_bool(policy.hflip_p.clamp(0.0, 1.0)) {
        image = flip_horizontal(&image);
        mask = flip_horizontal(&mask);
    }
    if rng.random_bool(policy.vflip_p.clamp(0.0, 1.0)) {
        image = flip_vertical(&image);
        mask = flip_vertical(&mask);
    }
    let size = image.shape().h;
    if policy.crop_min_area < 1.0 {
        let area = range(rng, (policy.crop_min_area.max(0.0), 1.0));
        let side = ((area.sqrt() * size as f64).round() as usize).clamp(1, size);
        if side < size {
            let top = rng.random_range(0..=size - side);
            let left = rng.random_range(0..=size - side);
            let (i, m) = resize_pair(&crop(&image, top, left, side), &crop(&mask, top, left, side), size);
            image = i;
            mask = m;
        }
    }
    let a = range(rng, policy.contrast) as f32;
    let b = range(rng, policy.brightness) as f32;
    if a != 1.0 || b != 0.0 {
        image = image.map(|v| (a * v + b).clamp(0.0, 1.0));
    }
    Sample { image, mask, ..sample.clone() }
}
