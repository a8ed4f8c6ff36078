//! Dual BCE + soft-IoU loss with deep supervision, and the segmentation
//! metrics DSC, IoU, recall and precision.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Loss settings. Weighting is off unless `boundary` is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub iou_eps: f64,
    pub boundary: Option<BoundaryWeight>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { iou_eps: 1.0, boundary: None }
    }
}

/// Extra weight `gain` for pixels within `radius` (Chebyshev distance) of a
/// pixel with the other label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryWeight {
    pub radius: usize,
    pub gain: f64,
}

impl Default for BoundaryWeight {
    fn default() -> Self {
        BoundaryWeight { radius: 2, gain: 4.0 }
    }
}

/// Per-pixel weights `1 + gain` near label edges, `1` elsewhere.
pub fn boundary_weights<T: Real>(target: &Tensor<T>, bw: BoundaryWeight) -> Tensor<T> {
    let s = target.shape();
    let r = bw.radius as isize;
    Tensor::from_fn(s, |[n, c, h, w]| {
        let label = target.at(n, c, h, w) >= T::from_f64(0.5);
        let mut near = false;
        'scan: for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (h as isize + dy, w as isize + dx);
                if y < 0 || x < 0 || y >= s.h as isize || x >= s.w as isize {
                    continue;
                }
                if (target.at(n, c, y as usize, x as usize) >= T::from_f64(0.5)) != label {
                    near = true;
                    break 'scan;
                }
            }
        }
        T::from_f64(if near { 1.0 + bw.gain } else { 1.0 })
    })
}

pub fn bce_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    g.bce_loss(pred, target, None)
}

pub fn soft_iou_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
    g.soft_iou_loss(pred, target, None, eps)
}

fn dual_with<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    weight: Option<&Tensor<T>>,
    eps: f64,
) -> Result<Var> {
    let bce = g.bce_loss(pred, target, weight)?;
    let iou = g.soft_iou_loss(pred, target, weight, eps)?;
    g.add(bce, iou)
}

/// `bce_loss + soft_iou_loss`.
pub fn dual_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    let weight = cfg.boundary.map(|b| boundary_weights(target, b));
    dual_with(g, pred, target, weight.as_ref(), cfg.iou_eps)
}

/// Sum of the dual loss over every supervised map.
pub fn total_loss<T: Real>(g: &mut Graph<T>, maps: &[Var], target: &Tensor<T>, cfg: &LossConfig) -> Result<Var> {
    if maps.is_empty() {
        return Err(Error::Usage("total_loss needs at least one map".into()));
    }
    let weight = cfg.boundary.map(|b| boundary_weights(target, b));
    let mut total = dual_with(g, maps[0], target, weight.as_ref(), cfg.iou_eps)?;
    for &m in &maps[1..] {
        let l = dual_with(g, m, target, weight.as_ref(), cfg.iou_eps)?;
        total = g.add(total, l)?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Binarises `pred >= threshold` and `target >= 0.5` and counts outcomes.
pub fn confusion<T: Real>(pred: &[T], target: &[T], threshold: f64) -> Result<ConfusionCounts> {
    if pred.len() != target.len() {
        return Err(shape_err!("confusion: prediction has {} pixels, target {}", pred.len(), target.len()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(target) {
        match (p.as_f64() >= threshold, t.as_f64() >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dsc: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
}

fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// Foreground metrics. When prediction and target are both empty every
/// metric is 1; otherwise a zero denominator gives 0.
pub fn metrics(c: ConfusionCounts) -> Metrics {
    let empty = c.tp + c.fp + c.fn_ == 0;
    Metrics {
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, empty),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, empty),
        recall: ratio(c.tp, c.tp + c.fn_, empty),
        precision: ratio(c.tp, c.tp + c.fp, empty),
    }
}

/// IoU of the background class, with the same empty convention.
pub fn background_iou(c: ConfusionCounts) -> f64 {
    ratio(c.tn, c.tn + c.fp + c.fn_, c.tn + c.fp + c.fn_ == 0)
}

/// How the dataset-level mIoU is aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiouMode {
    /// Mean over images of foreground IoU.
    #[default]
    Foreground,
    /// Mean over images of the average of foreground and background IoU.
    TwoClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub dsc: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    #[serde(skip)]
    pub background_iou: f64,
}

impl ImageMetrics {
    pub fn new(id: impl Into<String>, c: ConfusionCounts) -> Self {
        let m = metrics(c);
        ImageMetrics {
            id: id.into(),
            dsc: m.dsc,
            iou: m.iou,
            recall: m.recall,
            precision: m.precision,
            background_iou: background_iou(c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub dsc: f64,
    pub miou: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub miou_mode: MiouMode,
    pub means: MeanMetrics,
    pub rows: Vec<ImageMetrics>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

impl MetricReport {
    pub fn new(dataset: impl Into<String>, rows: Vec<ImageMetrics>, miou_mode: MiouMode) -> Self {
        let means = MeanMetrics {
            dsc: mean(rows.iter().map(|r| r.dsc)),
            miou: match miou_mode {
                MiouMode::Foreground => mean(rows.iter().map(|r| r.iou)),
                MiouMode::TwoClass => mean(rows.iter().map(|r| 0.5 * (r.iou + r.background_iou))),
            },
            recall: mean(rows.iter().map(|r| r.recall)),
            precision: mean(rows.iter().map(|r| r.precision)),
        };
        MetricReport { dataset: dataset.into(), miou_mode, means, rows }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,dsc,iou,recall,precision\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{}", r.id, r.dsc, r.iou, r.recall, r.precision).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` next to `path`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv = path.with_extension("csv");
        let json = path.with_extension("json");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}
