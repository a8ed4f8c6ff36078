//! Synthetic "acquisition centers": blob-shaped foreground objects rendered
//! over a textured, unevenly lit background.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mix_seed, Dataset, Sample, SplitTag};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlobFamily {
    SmoothEllipse,
    LumpyPolygon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterSpec {
    pub center_id: String,
    pub family: BlobFamily,
    pub fg_mean: [f64; 3],
    /// Variance of the low-frequency foreground texture.
    pub fg_var: f64,
    pub bg_mean: [f64; 3],
    pub bg_var: f64,
    pub noise_sigma: f64,
    /// Peak-to-peak amplitude of a linear illumination ramp.
    pub illumination: f64,
    pub blob_count: (usize, usize),
    /// Blob radius as a fraction of the image side.
    pub radius: (f64, f64),
    pub seed: u64,
}

impl CenterSpec {
    /// Bright pinkish scenes with smooth elliptical objects.
    pub fn preset_a() -> Self {
        CenterSpec {
            center_id: "A".into(),
            family: BlobFamily::SmoothEllipse,
            fg_mean: [0.92, 0.62, 0.50],
            fg_var: 0.002,
            bg_mean: [0.72, 0.36, 0.32],
            bg_var: 0.004,
            noise_sigma: 0.03,
            illumination: 0.15,
            blob_count: (1, 2),
            radius: (0.10, 0.25),
            seed: 1,
        }
    }

    /// Darker, noisier brownish scenes with irregular polygonal objects.
    pub fn preset_b() -> Self {
        CenterSpec {
            center_id: "B".into(),
            family: BlobFamily::LumpyPolygon,
            fg_mean: [0.62, 0.46, 0.28],
            fg_var: 0.003,
            bg_mean: [0.40, 0.26, 0.20],
            bg_var: 0.004,
            noise_sigma: 0.05,
            illumination: 0.25,
            blob_count: (1, 3),
            radius: (0.08, 0.22),
            seed: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.radius;
        if !(r0 > 0.0 && r0 <= r1 && r1 <= 0.5) {
            return Err(Error::Config(format!(
                "center {}: radius range ({r0}, {r1}) must satisfy 0 < min <= max <= 0.5",
                self.center_id
            )));
        }
        let (b0, b1) = self.blob_count;
        if b0 == 0 || b0 > b1 {
            return Err(Error::Config(format!(
                "center {}: blob count range ({b0}, {b1}) must satisfy 1 <= min <= max",
                self.center_id
            )));
        }
        if [self.fg_var, self.bg_var, self.noise_sigma, self.illumination].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(format!(
                "center {}: variances, noise and illumination must be >= 0",
                self.center_id
            )));
        }
        Ok(())
    }
}

enum Blob {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, theta: f64 },
    Polygon { vertices: Vec<(f64, f64)> },
}

impl Blob {
    fn random(family: BlobFamily, spec: &CenterSpec, rng: &mut ChaCha8Rng) -> Blob {
        let (r0, r1) = spec.radius;
        let cx = rng.random_range(0.2..0.8);
        let cy = rng.random_range(0.2..0.8);
        match family {
            BlobFamily::SmoothEllipse => {
                let r = rng.random_range(r0..=r1);
                let aspect = rng.random_range(0.6..=1.0);
                Blob::Ellipse { cx, cy, rx: r, ry: r * aspect, theta: rng.random_range(0.0..PI) }
            }
            BlobFamily::LumpyPolygon => {
                let r = rng.random_range(r0..=r1);
                let m = rng.random_range(6..=11);
                let phase = rng.random_range(0.0..2.0 * PI);
                let vertices = (0..m)
                    .map(|j| {
                        let a = phase + 2.0 * PI * j as f64 / m as f64;
                        let rj = r * rng.random_range(0.65..=1.3);
                        (cx + rj * a.cos(), cy + rj * a.sin())
                    })
                    .collect();
                Blob::Polygon { vertices }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Blob::Ellipse { cx, cy, rx, ry, theta } => {
                let (dx, dy) = (x - cx, y - cy);
                let (s, c) = theta.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Blob::Polygon { vertices } => {
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (xi, yi) = vertices[i];
                    let (xj, yj) = vertices[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }
}

/// Smooth random field: a few low-frequency sinusoids, unit variance.
struct Texture {
    waves: Vec<(f64, f64, f64)>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..4)
            .map(|_| {
                let angle = rng.random_range(0.0..2.0 * PI);
                let freq = rng.random_range(1.0..6.0) * 2.0 * PI;
                (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Texture { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        // each sinusoid has variance 1/2; four of them sum to variance 2
        self.waves.iter().map(|(fx, fy, p)| (fx * x + fy * y + p).sin()).sum::<f64>() / 2f64.sqrt()
    }
}

const MAX_FG_FRACTION: f64 = 0.6;
const MAX_ATTEMPTS: usize = 64;

fn render_mask(blobs: &[Blob], size: usize) -> Vec<bool> {
    let mut mask = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            mask[y * size + x] = blobs.iter().any(|b| b.contains(u, v));
        }
    }
    mask
}

/// Sample `index` of a center; depends only on `(spec, index, size)`.
pub fn generate_sample(spec: &CenterSpec, index: usize, size: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index as u64));
    let mut mask = None;
    for _ in 0..MAX_ATTEMPTS {
        let count = rng.random_range(spec.blob_count.0..=spec.blob_count.1);
        let blobs: Vec<Blob> = (0..count).map(|_| Blob::random(spec.family, spec, &mut rng)).collect();
        let m = render_mask(&blobs, size);
        let fg = m.iter().filter(|&&b| b).count() as f64 / (size * size) as f64;
        if fg > 0.0 && fg < MAX_FG_FRACTION {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        Error::Config(format!(
            "center {}: could not place blobs with foreground fraction in (0, {MAX_FG_FRACTION}) at size {size}",
            spec.center_id
        ))
    })?;

    let fg_tex = Texture::random(&mut rng);
    let bg_tex = Texture::random(&mut rng);
    let light_angle = rng.random_range(0.0..2.0 * PI);
    let (lx, ly) = (light_angle.cos(), light_angle.sin());
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let (fg_sd, bg_sd) = (spec.fg_var.sqrt(), spec.bg_var.sqrt());

    let mut image = Tensor::zeros(Shape::new(1, 3, size, size));
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let inside = mask[y * size + x];
            let (base, tex) =
                if inside { (spec.fg_mean, fg_sd * fg_tex.at(u, v)) } else { (spec.bg_mean, bg_sd * bg_tex.at(u, v)) };
            let light = spec.illumination * ((u - 0.5) * lx + (v - 0.5) * ly);
            for (c, &b) in base.iter().enumerate() {
                let val = b + tex + light + noise.sample(&mut rng);
                image.set(0, c, y, x, val.clamp(0.0, 1.0) as f32);
            }
        }
    }
    let mask = Tensor::from_fn(Shape::new(1, 1, size, size), |[_, _, y, x]| if mask[y * size + x] { 1.0 } else { 0.0 });
    Ok(Sample {
        id: format!("{}_{index:05}", spec.center_id),
        center_id: spec.center_id.clone(),
        split: SplitTag::Unassigned,
        image,
        mask,
    })
}

/// `n` samples of a center at `size × size`.
pub fn generate_center(spec: &CenterSpec, n: usize, size: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("generate_center: n must be >= 1".into()));
    }
    if size < 16 {
        return Err(Error::Config(format!("generate_center: size {size} < 16")));
    }
    let samples = (0..n).into_par_iter().map(|i| generate_sample(spec, i, size)).collect::<Result<_>>()?;
    Ok(Dataset::new(samples))
}
