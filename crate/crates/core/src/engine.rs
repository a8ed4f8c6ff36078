//! Training, evaluation, prediction and the cross-center report.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{self, augment, mix_seed, pnm, AugmentPolicy, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::loss::{confusion, total_loss, ImageMetrics, LossConfig, MeanMetrics, MetricReport, MiouMode};
use crate::network::{Model, ModelConfig};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::Session;
use crate::tensor::kernels::resize_nearest;
use crate::tensor::{Mode, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// `None` trains on the samples as stored.
    pub augment: Option<AugmentPolicy>,
    pub loss: LossConfig,
    pub model: ModelConfig,
    /// Batch size used for validation forwards.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 8,
            epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            max_steps: None,
            augment: Some(AugmentPolicy::default()),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            eval_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        self.model.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

/// Where `train` writes its artifacts. Any of them may be skipped.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub best: Option<PathBuf>,
    pub last: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl TrainOutputs {
    /// `best.ckpt`, `final.ckpt` and `train_log.csv` inside `dir`.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        TrainOutputs {
            best: Some(dir.join("best.ckpt")),
            last: Some(dir.join("final.ckpt")),
            log: Some(dir.join("train_log.csv")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    /// `None` when there is no validation set.
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub model: Model<f32>,
    pub log: Vec<EpochLog>,
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_val_dsc: Option<f64>,
}

fn log_csv(rows: &[EpochLog]) -> String {
    let mut out = String::from("epoch,steps,train_loss,val_dsc\n");
    for r in rows {
        let val = r.val_dsc.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.steps, r.train_loss, val));
    }
    out
}

/// Sample order for `epoch`: a permutation seeded by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64)));
    order
}

const AUGMENT_STREAM: u64 = 0x6175_676d;

/// One forward/backward/update on a batch; returns the total loss.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    images: &Tensor<f32>,
    masks: &Tensor<f32>,
    cfg: &TrainConfig,
) -> Result<f64> {
    model.store.zero_grad();
    let loss = {
        let mut s = Session::new(&mut model.store, Mode::Train);
        let x = s.graph.input(images.clone());
        let maps = model.net.forward(&mut s, x)?;
        let loss = total_loss(&mut s.graph, &maps, masks, &cfg.loss)?;
        let value = s.graph.value(loss).item()?.into();
        if !f64::is_finite(value) {
            return Err(Error::Numerics(format!("non-finite training loss {value}")));
        }
        s.backward(loss)?;
        value
    };
    adam_step(&mut model.store, adam, &cfg.adam())?;
    Ok(loss)
}

/// Trains from a fresh model built from `cfg.model`.
pub fn train(cfg: &TrainConfig, train_set: &Dataset, val_set: &Dataset, out: &TrainOutputs) -> Result<TrainResult> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let size = train_set.input_size()?;
    if size != cfg.model.input_size {
        return Err(Error::Config(format!(
            "training images are {size}x{size} but the model expects {}",
            cfg.model.input_size
        )));
    }
    let mut model = Model::<f32>::new(&cfg.model)?;
    let mut adam = AdamState::new(&model.store);
    let mut log = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<f64> = None;
    let mut steps = 0usize;
    let budget = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 0..cfg.epochs {
        if steps >= budget {
            break;
        }
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let aug_seed = mix_seed(cfg.seed ^ AUGMENT_STREAM, epoch as u64);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if steps >= budget {
                break;
            }
            let (images, masks) = match &cfg.augment {
                None => train_set.batch(chunk)?,
                Some(policy) => {
                    let samples: Vec<_> = chunk
                        .par_iter()
                        .map(|&i| {
                            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(aug_seed, i as u64));
                            augment(&train_set.samples[i], &mut rng, policy)
                        })
                        .collect();
                    Dataset::new(samples).batch(&(0..chunk.len()).collect::<Vec<_>>())?
                }
            };
            let loss = match train_step(&mut model, &mut adam, &images, &masks, cfg) {
                Ok(l) => l,
                Err(e @ Error::Numerics(_)) => {
                    // Weights are untouched by a failed step; keep them.
                    if let Some(path) = &out.last {
                        checkpoint::save(&model, path)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            step_losses.push(loss);
            epoch_loss += loss;
            epoch_batches += 1;
            steps += 1;
        }
        let val_dsc = if val_set.is_empty() {
            None
        } else {
            Some(evaluate_with(&mut model, val_set, "val", cfg.eval_batch, MiouMode::Foreground)?.means.dsc)
        };
        log.push(EpochLog { epoch: epoch + 1, steps, train_loss: epoch_loss / epoch_batches.max(1) as f64, val_dsc });
        if let Some(path) = &out.log {
            fs::write(path, log_csv(&log)).map_err(|e| Error::io(path, e))?;
        }
        if let (Some(dsc), Some(path)) = (val_dsc, &out.best) {
            if best.is_none_or(|b| dsc > b) {
                checkpoint::save(&model, path)?;
            }
        }
        if let Some(dsc) = val_dsc {
            best = Some(best.map_or(dsc, |b| b.max(dsc)));
        }
        if steps >= budget {
            break 'epochs;
        }
    }
    if let Some(path) = &out.last {
        checkpoint::save(&model, path)?;
    }
    Ok(TrainResult { model, log, step_losses, best_val_dsc: best })
}

/// Anything that maps an image batch to primary probability maps.
pub trait Predictor {
    fn input_size(&self) -> usize;

    /// `(N, 3, S, S)` images to `(N, 1, S, S)` probabilities.
    fn predict(&mut self, images: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Predictor for Model<f32> {
    fn input_size(&self) -> usize {
        self.config().input_size
    }

    fn predict(&mut self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [_, _, _, p1] = Model::predict(self, images)?;
        Ok(p1)
    }
}

/// Per-image metrics of the primary prediction at threshold 0.5.
pub fn evaluate_with(
    predictor: &mut impl Predictor,
    dataset: &Dataset,
    label: &str,
    batch: usize,
    mode: MiouMode,
) -> Result<MetricReport> {
    if !dataset.is_empty() {
        let size = dataset.input_size()?;
        if size != predictor.input_size() {
            return Err(Error::Format(format!(
                "model expects {0}x{0} inputs but dataset {label} is {size}x{size}",
                predictor.input_size()
            )));
        }
    }
    let mut rows = Vec::with_capacity(dataset.len());
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (images, masks) = dataset.batch(chunk)?;
        let pred = predictor.predict(&images)?;
        let item = masks.shape().item();
        for (j, &i) in chunk.iter().enumerate() {
            let p = &pred.data()[j * item..(j + 1) * item];
            let t = &masks.data()[j * item..(j + 1) * item];
            rows.push(ImageMetrics::new(dataset.samples[i].id.clone(), confusion(p, t, 0.5)?));
        }
    }
    Ok(MetricReport::new(label, rows, mode))
}

/// Loads a checkpoint, evaluates it and writes `<report>.csv` / `.json`.
pub fn evaluate(ckpt: impl AsRef<Path>, dataset: &Dataset, report: impl AsRef<Path>) -> Result<MetricReport> {
    let mut model = checkpoint::load(ckpt)?;
    let r = evaluate_with(&mut model, dataset, "eval", 16, MiouMode::Foreground)?;
    r.write(report)?;
    Ok(r)
}

/// Segments one PPM image and writes a `{0, 255}` P5 mask at its original size.
pub fn predict_file(model: &mut Model<f32>, image: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<()> {
    let img = pnm::read_image(image)?;
    let (h, w) = (img.shape().h, img.shape().w);
    let size = model.config().input_size;
    let dummy = Tensor::zeros(Shape::new(1, 1, h, w));
    let (resized, _) = data::resize_pair(&img, &dummy, size);
    let p1 = Predictor::predict(model, &resized)?;
    let bin = p1.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    pnm::write_mask(&resize_nearest(&bin, h, w), out)
}

pub fn predict(ckpt: impl AsRef<Path>, image: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<()> {
    let mut model = checkpoint::load(ckpt)?;
    predict_file(&mut model, image, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub source: MeanMetrics,
    pub unseen: MeanMetrics,
    /// Source DSC minus unseen DSC.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationReport {
    pub rows: Vec<ReportRow>,
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "source_dsc",
    "source_miou",
    "source_recall",
    "source_precision",
    "unseen_dsc",
    "unseen_miou",
    "unseen_recall",
    "unseen_precision",
];

impl ReportRow {
    pub fn cells(&self) -> [f64; 8] {
        let (s, u) = (&self.source, &self.unseen);
        [s.dsc, s.miou, s.recall, s.precision, u.dsc, u.miou, u.recall, u.precision]
    }
}

impl GeneralizationReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("model,{}\n", REPORT_COLUMNS.join(","));
        for r in &self.rows {
            let cells: Vec<String> = r.cells().iter().map(|c| c.to_string()).collect();
            out.push_str(&format!("{},{}\n", r.model, cells.join(",")));
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv = path.with_extension("csv");
        let json = path.with_extension("json");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))
    }
}

/// Test split if the dataset has one, otherwise every sample.
fn source_split(d: &Dataset) -> Dataset {
    let test = d.subset(SplitTag::Test);
    if test.is_empty() {
        d.clone()
    } else {
        test
    }
}

fn report_row(name: &str, model: &mut impl Predictor, own: &Dataset, other: &Dataset) -> Result<ReportRow> {
    let source = evaluate_with(model, &source_split(own), "source", 16, MiouMode::Foreground)?.means;
    let unseen = evaluate_with(model, other, "unseen", 16, MiouMode::Foreground)?.means;
    Ok(ReportRow { model: name.into(), gap: source.dsc - unseen.dsc, source, unseen })
}

/// Each model on its own center's test split and on the other center's
/// full set.
pub fn generalization_report(
    model_a: &mut impl Predictor,
    model_b: &mut impl Predictor,
    data_a: &Dataset,
    data_b: &Dataset,
) -> Result<GeneralizationReport> {
    Ok(GeneralizationReport {
        rows: vec![report_row("model-A", model_a, data_a, data_b)?, report_row("model-B", model_b, data_b, data_a)?],
    })
}

/// Loads both checkpoints and both dataset folders, writes the report.
pub fn report_files(
    ckpt_a: impl AsRef<Path>,
    ckpt_b: impl AsRef<Path>,
    data_a: impl AsRef<Path>,
    data_b: impl AsRef<Path>,
    out: impl AsRef<Path>,
) -> Result<GeneralizationReport> {
    let mut a = checkpoint::load(ckpt_a)?;
    let mut b = checkpoint::load(ckpt_b)?;
    let da = data::load_folder(data_a, a.config().input_size)?;
    let db = data::load_folder(data_b, b.config().input_size)?;
    let report = generalization_report(&mut a, &mut b, &da, &db)?;
    report.write(out)?;
    Ok(report)
}
