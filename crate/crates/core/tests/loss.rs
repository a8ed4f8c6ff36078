use gmsrf_core::loss::{
    bce_loss, confusion, dual_loss, metrics, soft_iou_loss, total_loss, ConfusionCounts, ImageMetrics, LossConfig,
    MetricReport, MiouMode,
};
use gmsrf_core::{Error, Graph, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar(g: &Graph<f64>, v: gmsrf_core::Var) -> f64 {
    g.value(v).data()[0]
}

fn half_target(n: usize) -> Tensor<f64> {
    Tensor::from_fn(Shape::new(1, 1, n, n), |[_, _, h, _]| (h < n / 2) as u8 as f64)
}

#[test]
fn bce_examples() {
    let mut g = Graph::<f64>::new();
    let p = g.input(Tensor::full(Shape::new(2, 1, 4, 4), 0.5));
    let l = bce_loss(&mut g, p, &Tensor::from_fn(Shape::new(2, 1, 4, 4), |[_, _, h, _]| (h < 2) as u8 as f64)).unwrap();
    assert!((scalar(&g, l) - std::f64::consts::LN_2).abs() < 1e-12);

    let p = g.input(Tensor::full(Shape::new(1, 1, 1, 1), 0.8));
    let l = bce_loss(&mut g, p, &Tensor::full(Shape::new(1, 1, 1, 1), 1.0)).unwrap();
    assert!((scalar(&g, l) - 0.223144).abs() < 1e-6);

    let t = half_target(8);
    let p = g.input(t.clone());
    let l = bce_loss(&mut g, p, &t).unwrap();
    assert!(scalar(&g, l) < 1e-6);
}

#[test]
fn bce_shape_mismatch() {
    let mut g = Graph::<f64>::new();
    let p = g.input(Tensor::full(Shape::new(1, 1, 4, 4), 0.5));
    assert!(matches!(bce_loss(&mut g, p, &half_target(8)), Err(Error::Shape(_))));
    assert!(matches!(soft_iou_loss(&mut g, p, &half_target(8), 1.0), Err(Error::Shape(_))));
}

#[test]
fn soft_iou_closed_forms() {
    let mut g = Graph::<f64>::new();
    let t = half_target(6);
    for eps in [1.0, 1e-12, 5.0] {
        let p = g.input(t.clone());
        let l = soft_iou_loss(&mut g, p, &t, eps).unwrap();
        assert_eq!(scalar(&g, l), 0.0);
    }
    let n = 36.0;
    let p = g.input(Tensor::full(Shape::new(1, 1, 6, 6), 1.0));
    let l = soft_iou_loss(&mut g, p, &Tensor::zeros(Shape::new(1, 1, 6, 6)), 1.0).unwrap();
    assert!((scalar(&g, l) - (1.0 - 1.0 / (n + 1.0))).abs() < 1e-12);

    let p = g.input(Tensor::full(Shape::new(1, 1, 6, 6), 0.5));
    let l = soft_iou_loss(&mut g, p, &t, 1e-12).unwrap();
    assert!((scalar(&g, l) - 2.0 / 3.0).abs() < 1e-9);
}

#[test]
fn soft_iou_on_binary_prediction_is_one_minus_iou() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let pv = Tensor::<f64>::from_fn(Shape::new(1, 1, 8, 8), |_| rng.random_bool(0.4) as u8 as f64);
        let tv = Tensor::<f64>::from_fn(Shape::new(1, 1, 8, 8), |_| rng.random_bool(0.4) as u8 as f64);
        let iou = metrics(confusion(pv.data(), tv.data(), 0.5).unwrap()).iou;
        let mut g = Graph::new();
        let p = g.input(pv);
        let l = soft_iou_loss(&mut g, p, &tv, 1e-12).unwrap();
        assert!((scalar(&g, l) - (1.0 - iou)).abs() < 1e-9);
    }
}

#[test]
fn dual_is_sum_of_terms() {
    let mut g = Graph::<f64>::new();
    let t = half_target(8);
    let p = g.input(Tensor::full(Shape::new(1, 1, 8, 8), 0.5));
    let cfg = LossConfig { iou_eps: 1e-12, boundary: None };
    let d = dual_loss(&mut g, p, &t, &cfg).unwrap();
    let b = bce_loss(&mut g, p, &t).unwrap();
    let i = soft_iou_loss(&mut g, p, &t, 1e-12).unwrap();
    assert_eq!(scalar(&g, d), scalar(&g, b) + scalar(&g, i));
    assert!((scalar(&g, d) - (std::f64::consts::LN_2 + 2.0 / 3.0)).abs() < 1e-9);

    let perfect = g.input(t.clone());
    let d = dual_loss(&mut g, perfect, &t, &LossConfig::default()).unwrap();
    assert!(scalar(&g, d) < 1e-6);
}

#[test]
fn total_of_identical_maps_is_four_duals() {
    let mut g = Graph::<f64>::new();
    let t = half_target(8);
    let p = g.input(Tensor::from_fn(Shape::new(1, 1, 8, 8), |[_, _, h, w]| 0.1 + 0.1 * ((h + w) % 8) as f64));
    let cfg = LossConfig::default();
    let one = dual_loss(&mut g, p, &t, &cfg).unwrap();
    let all = total_loss(&mut g, &[p, p, p, p], &t, &cfg).unwrap();
    assert!((scalar(&g, all) - 4.0 * scalar(&g, one)).abs() < 1e-12);

    let q = g.input(t.clone());
    let all = total_loss(&mut g, &[q, q, q, q], &t, &cfg).unwrap();
    assert!(scalar(&g, all) < 4e-6);
    assert!(matches!(total_loss(&mut g, &[], &t, &cfg), Err(Error::Usage(_))));
}

#[test]
fn total_loss_reaches_every_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::<f64>::new();
    let t = half_target(8);
    let maps: Vec<_> = (0..4)
        .map(|_| {
            let v = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_| rng.random_range(0.05..0.95));
            g.param(v)
        })
        .collect();
    let l = total_loss(&mut g, &maps, &t, &LossConfig::default()).unwrap();
    g.backward(l).unwrap();
    for m in maps {
        assert!(g.grad(m).unwrap().data().iter().any(|&v| v != 0.0));
    }
}

#[test]
fn boundary_weights_change_the_loss() {
    let mut g = Graph::<f64>::new();
    let t = half_target(8);
    let p = g.input(Tensor::full(Shape::new(1, 1, 8, 8), 0.3));
    let plain = dual_loss(&mut g, p, &t, &LossConfig::default()).unwrap();
    let cfg = LossConfig { boundary: Some(Default::default()), ..Default::default() };
    let weighted = dual_loss(&mut g, p, &t, &cfg).unwrap();
    assert!(scalar(&g, weighted) >= 0.0);
    assert_ne!(scalar(&g, plain), scalar(&g, weighted));
}

fn oracle(pred: &[f64], target: &[f64]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for i in 0..pred.len() {
        match (pred[i] >= 0.5, target[i] >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

#[test]
fn confusion_examples() {
    let t: Vec<f64> = (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let c = confusion(&t, &t, 0.5).unwrap();
    assert_eq!((c.fp, c.fn_), (0, 0));
    let c = confusion(&[0.7; 16], &[0.0; 16], 0.5).unwrap();
    assert_eq!(c.fp, 16);
    assert!(matches!(confusion(&[0.5; 3], &[0.0; 4], 0.5), Err(Error::Shape(_))));
}

#[test]
fn metric_examples() {
    let m = metrics(ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 11 });
    assert_eq!((m.dsc, m.iou, m.recall, m.precision), (1.0, 1.0, 1.0, 1.0));
    let m = metrics(ConfusionCounts { tp: 0, fp: 4, fn_: 4, tn: 8 });
    assert_eq!((m.dsc, m.iou, m.recall, m.precision), (0.0, 0.0, 0.0, 0.0));
    let m = metrics(ConfusionCounts { tp: 4, fp: 0, fn_: 4, tn: 8 });
    assert_eq!(m.precision, 1.0);
    assert_eq!(m.recall, 0.5);
    assert!((m.dsc - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(m.iou, 0.5);
    let m = metrics(ConfusionCounts { tp: 0, fp: 0, fn_: 0, tn: 16 });
    assert_eq!((m.dsc, m.iou, m.recall, m.precision), (1.0, 1.0, 1.0, 1.0));
    let m = metrics(ConfusionCounts { tp: 0, fp: 3, fn_: 0, tn: 13 });
    assert_eq!(m.recall, 0.0);
}

#[test]
fn thousand_random_pairs_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let density = rng.random_range(0.0..1.0);
        let pred: Vec<f64> = (0..256).map(|_| rng.random_range(0.0..1.0)).collect();
        let target: Vec<f64> = (0..256).map(|_| rng.random_bool(density) as u8 as f64).collect();
        let c = confusion(&pred, &target, 0.5).unwrap();
        let o = oracle(&pred, &target);
        assert_eq!(c, o);
        assert_eq!(c.total(), 256);
        let m = metrics(c);
        let (tp, fp, fn_) = (o.tp as f64, o.fp as f64, o.fn_ as f64);
        if tp + fp + fn_ > 0.0 {
            assert_eq!(m.iou, tp / (tp + fp + fn_));
            assert_eq!(m.dsc, 2.0 * tp / (2.0 * tp + fp + fn_));
        }
        assert!((m.dsc - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn metrics_in_unit_interval(tp in 0u64..50, fp in 0u64..50, fn_ in 0u64..50, tn in 0u64..50) {
        let m = metrics(ConfusionCounts { tp, fp, fn_, tn });
        for v in [m.dsc, m.iou, m.recall, m.precision] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((m.dsc - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
    }
}

#[test]
fn report_means_and_serialization() {
    let rows = vec![
        ImageMetrics::new("a", ConfusionCounts { tp: 4, fp: 0, fn_: 4, tn: 8 }),
        ImageMetrics::new("b", ConfusionCounts { tp: 3, fp: 1, fn_: 0, tn: 12 }),
        ImageMetrics::new("c", ConfusionCounts { tp: 0, fp: 2, fn_: 2, tn: 12 }),
    ];
    let report = MetricReport::new("source", rows.clone(), MiouMode::Foreground);
    let mean_dsc = rows.iter().map(|r| r.dsc).sum::<f64>() / 3.0;
    assert!((report.means.dsc - mean_dsc).abs() < 1e-12);
    assert!((report.means.miou - (0.5 + 0.75 + 0.0) / 3.0).abs() < 1e-12);

    let csv = report.to_csv();
    assert!(csv.starts_with("id,dsc,iou,recall,precision\n"));
    assert_eq!(csv.lines().count(), 4);
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(json["dataset"], "source");
    assert_eq!(json["rows"].as_array().unwrap().len(), 3);
    assert!(json["means"]["dsc"].is_number());

    let two = MetricReport::new("source", rows, MiouMode::TwoClass);
    assert!(two.means.miou > report.means.miou);

    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path().join("metrics")).unwrap();
    assert!(dir.path().join("metrics.csv").exists());
    assert!(dir.path().join("metrics.json").exists());
}
