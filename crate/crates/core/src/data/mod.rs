//! Samples, datasets, splits and the on-disk folder layout.
//!
//! A dataset folder holds `images/<id>.ppm`, `masks/<id>.pgm` and an optional
//! `dataset.json` manifest with the center and split of every id.

pub mod augment;
pub mod pnm;
pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::{resize_bilinear_forward, resize_nearest};
use crate::tensor::{Shape, Tensor};

pub use augment::{augment, AugmentPolicy};
pub use synth::{generate_center, BlobFamily, CenterSpec};

/// Mixes two integers into a well-spread 64-bit seed.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub center_id: String,
    pub split: SplitTag,
    /// `(1, 3, S, S)` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `(1, 1, S, S)` with values in {0, 1}.
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.shape().h
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.mean()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    /// Samples tagged with `tag`.
    pub fn subset(&self, tag: SplitTag) -> Dataset {
        Dataset::new(self.samples.iter().filter(|s| s.split == tag).cloned().collect())
    }

    /// Stacks the chosen samples into `(images, masks)` batches.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let images: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.samples[i].image).collect();
        let masks: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.samples[i].mask).collect();
        Ok((Tensor::stack_batch(&images)?, Tensor::stack_batch(&masks)?))
    }

    /// Common spatial size, or an error if samples disagree.
    pub fn input_size(&self) -> Result<usize> {
        let first = self.samples.first().ok_or_else(|| Error::Data("dataset is empty".into()))?.size();
        if let Some(s) = self.samples.iter().find(|s| s.size() != first || s.image.shape().w != first) {
            return Err(Error::Data(format!("sample {} is {}, expected {first}x{first}", s.id, s.image.shape())));
        }
        Ok(first)
    }
}

/// Split sizes for `n` items: each non-train part is `round(ratio * n)`, the
/// remainder goes to train.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios ({a}, {b}, {c}) must lie in [0, 1] and sum to 1")));
    }
    let val = ((b * n as f64).round() as usize).min(n);
    let test = ((c * n as f64).round() as usize).min(n - val);
    Ok((n - val - test, val, test))
}

/// Seeded shuffle into disjoint train/val/test sets, tagging each sample.
pub fn split(dataset: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (n_train, n_val, _) = split_sizes(dataset.len(), ratios)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |range: &[usize], tag: SplitTag| {
        let mut idx = range.to_vec();
        idx.sort_unstable();
        Dataset::new(idx.into_iter().map(|i| Sample { split: tag, ..dataset.samples[i].clone() }).collect())
    };
    Ok((
        take(&order[..n_train], SplitTag::Train),
        take(&order[n_train..n_train + n_val], SplitTag::Val),
        take(&order[n_train + n_val..], SplitTag::Test),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub center_id: String,
    pub split: SplitTag,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "dataset.json";

/// Writes images, masks and the manifest under `dir`.
pub fn save_folder(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for s in &dataset.samples {
        pnm::write_image(&s.image, dir.join("images").join(format!("{}.ppm", s.id)))?;
        pnm::write_mask(&s.mask, dir.join("masks").join(format!("{}.pgm", s.id)))?;
    }
    let manifest = Manifest {
        samples: dataset
            .samples
            .iter()
            .map(|s| ManifestEntry { id: s.id.clone(), center_id: s.center_id.clone(), split: s.split })
            .collect(),
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

fn stems(dir: &Path, ext: &str) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Resizes an image bilinearly and a mask by nearest neighbour + threshold.
pub fn resize_pair(image: &Tensor<f32>, mask: &Tensor<f32>, size: usize) -> (Tensor<f32>, Tensor<f32>) {
    let image = if image.shape().h == size && image.shape().w == size {
        image.clone()
    } else {
        resize_bilinear_forward(image, size, size)
    };
    let mask = resize_nearest(mask, size, size).map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    (image, mask)
}

/// Loads `images/*.ppm` paired with `masks/*.pgm`, resized to `input_size`.
/// Samples are ordered by id.
pub fn load_folder(dir: impl AsRef<Path>, input_size: usize) -> Result<Dataset> {
    let dir = dir.as_ref();
    let images = stems(&dir.join("images"), "ppm")?;
    let masks = stems(&dir.join("masks"), "pgm")?;
    if let Some(stem) = images.keys().find(|k| !masks.contains_key(*k)) {
        return Err(Error::Data(format!("image {stem} has no matching mask")));
    }
    if let Some(stem) = masks.keys().find(|k| !images.contains_key(*k)) {
        return Err(Error::Data(format!("mask {stem} has no matching image")));
    }
    let manifest_path = dir.join(MANIFEST);
    let tags: BTreeMap<String, ManifestEntry> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.samples.into_iter().map(|e| (e.id.clone(), e)).collect()
    } else {
        BTreeMap::new()
    };
    let mut samples = Vec::with_capacity(images.len());
    for (stem, img_path) in &images {
        let image = pnm::read_image(img_path)?;
        let mask = pnm::read_mask(&masks[stem])?;
        if (image.shape().h, image.shape().w) != (mask.shape().h, mask.shape().w) {
            return Err(Error::Data(format!(
                "{stem}: image {} and mask {} differ in size",
                image.shape(),
                mask.shape()
            )));
        }
        let (image, mask) = resize_pair(&image, &mask, input_size);
        let entry = tags.get(stem);
        samples.push(Sample {
            id: stem.clone(),
            center_id: entry.map(|e| e.center_id.clone()).unwrap_or_else(|| "unknown".into()),
            split: entry.map(|e| e.split).unwrap_or_default(),
            image,
            mask,
        });
    }
    Ok(Dataset::new(samples))
}

/// Shape of one image batch item.
pub fn image_shape(size: usize) -> Shape {
    Shape::new(1, 3, size, size)
}
