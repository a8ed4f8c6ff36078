use gmsrf_core::blocks::{ConvBlock, ConvOpts, SqueezeExcite};
use gmsrf_core::gmsrf::{apply_attention, fusion_input_width, other_scales, Cmsa, FusionLayer, GmsrfModule, Msfs};
use gmsrf_core::gradsuite::gmsrf_module_check;
use gmsrf_core::{Error, Init, Mode, ParamStore, ScaleBundle, Session, Shape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: Shape, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn bundle(s: &mut Session<f32>, n: usize, c0: usize, base: usize, seed: u64) -> ScaleBundle {
    let v: Vec<Var> =
        (0..4).map(|i| s.graph.input(random(Shape::new(n, c0, base >> i, base >> i), seed + i as u64))).collect();
    ScaleBundle([v[0], v[1], v[2], v[3]])
}

#[test]
fn cmsa_shape_and_range() {
    let mut store = ParamStore::<f32>::new();
    let cmsa = Cmsa::new(&mut Init::new(&mut store, 0), 1, 8);
    let mut s = Session::new(&mut store, Mode::Train);
    let others = [
        s.graph.input(random(Shape::new(1, 8, 8, 8), 1)),
        s.graph.input(random(Shape::new(1, 8, 4, 4), 2)),
        s.graph.input(random(Shape::new(1, 8, 2, 2), 3)),
    ];
    let att = cmsa.forward(&mut s, others, 16).unwrap();
    assert_eq!(s.graph.shape(att), Shape::new(1, 8, 16, 16));
    assert!(s.graph.value(att).data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(s.stats.cmsa_maps, 1);
}

#[test]
fn cmsa_zero_inputs_and_biases_give_half() {
    let mut store = ParamStore::<f32>::new();
    let cmsa = Cmsa::new(&mut Init::new(&mut store, 0), 2, 4);
    let mut s = Session::new(&mut store, Mode::Train);
    let others = [
        s.graph.input(Tensor::zeros(Shape::new(2, 4, 8, 8))),
        s.graph.input(Tensor::zeros(Shape::new(2, 4, 2, 2))),
        s.graph.input(Tensor::zeros(Shape::new(2, 4, 1, 1))),
    ];
    let att = cmsa.forward(&mut s, others, 8).unwrap();
    assert!(s.graph.value(att).data().iter().all(|&v| v == 0.5));
}

#[test]
fn cmsa_rejects_inconsistent_scale() {
    let mut store = ParamStore::<f32>::new();
    let cmsa = Cmsa::new(&mut Init::new(&mut store, 0), 1, 2);
    let mut s = Session::new(&mut store, Mode::Train);
    let others = [
        s.graph.input(random(Shape::new(1, 2, 8, 8), 1)),
        s.graph.input(random(Shape::new(1, 2, 3, 3), 2)),
        s.graph.input(random(Shape::new(1, 2, 2, 2), 3)),
    ];
    assert!(matches!(cmsa.forward(&mut s, others, 16), Err(Error::Shape(_))));
}

fn fusion_fixture(layer: usize) -> (ParamStore<f32>, FusionLayer) {
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(&mut store, 0);
    let unit = FusionLayer {
        layer,
        cmsa: Cmsa::new(&mut init, 1, 8),
        conv: ConvBlock::new(&mut init, "fuse", fusion_input_width(32, 8, layer.max(2)), 8, ConvOpts::same(3)),
    };
    (store, unit)
}

#[test]
fn fusion_layer_channel_arithmetic() {
    assert_eq!(fusion_input_width(32, 8, 2), 32 + 8 + 24);
    assert_eq!(fusion_input_width(32, 8, 3), 32 + 16 + 24);
    let (mut store, unit) = fusion_fixture(2);
    assert_eq!(unit.conv.in_channels, 64);
    let mut s = Session::new(&mut store, Mode::Train);
    let history =
        [s.graph.input(random(Shape::new(1, 32, 16, 16), 1)), s.graph.input(random(Shape::new(1, 8, 16, 16), 2))];
    let others = [
        s.graph.input(random(Shape::new(1, 8, 8, 8), 3)),
        s.graph.input(random(Shape::new(1, 8, 4, 4), 4)),
        s.graph.input(random(Shape::new(1, 8, 2, 2), 5)),
    ];
    let resampled = unit.cmsa.resample(&mut s, others, 16).unwrap();
    let out = unit.fuse(&mut s, &history, resampled).unwrap();
    assert_eq!(s.graph.shape(out), Shape::new(1, 8, 16, 16));
    assert_eq!(s.stats.fusion_convs, 1);
}

#[test]
fn fusion_layer_one_is_usage_error() {
    let (mut store, unit) = fusion_fixture(1);
    let mut s = Session::new(&mut store, Mode::Train);
    let x = s.graph.input(random(Shape::new(1, 32, 4, 4), 1));
    let o = s.graph.input(random(Shape::new(1, 8, 4, 4), 1));
    assert!(matches!(unit.fuse(&mut s, &[x], [o, o, o]), Err(Error::Usage(_))));
}

#[test]
fn initial_layer_shape_and_determinism() {
    let mut store = ParamStore::<f32>::new();
    let m = GmsrfModule::new(&mut Init::new(&mut store, 0), 1, 32, 8, 3, 4).unwrap();
    let xv = random(Shape::new(1, 32, 8, 8), 9);
    let run = |store: &mut ParamStore<f32>| {
        let mut s = Session::new(store, Mode::Train);
        let x = s.graph.input(xv.clone());
        let y = m.initial_layer(&mut s, 2, x).unwrap();
        s.graph.value(y).clone()
    };
    let a = run(&mut store);
    let b = run(&mut store);
    assert_eq!(a.shape(), Shape::new(1, 8, 8, 8));
    assert_eq!(a, b);
}

#[test]
fn apply_attention_examples() {
    let mut store = ParamStore::<f32>::new();
    let mut s = Session::new(&mut store, Mode::Train);
    let xv = random(Shape::new(1, 2, 3, 3), 4);
    let x = s.graph.input(xv.clone());
    for (att, expect) in [(1.0, xv.clone()), (0.0, Tensor::zeros(xv.shape())), (0.5, xv.map(|v| v * 0.5))] {
        let a = s.graph.input(Tensor::full(xv.shape(), att));
        let y = apply_attention(&mut s, x, a).unwrap();
        assert_eq!(s.graph.value(y), &expect);
    }
}

#[test]
fn msfs_zero_branch_is_residual_identity() {
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(&mut store, 0);
    let msfs = Msfs {
        se: SqueezeExcite::new(&mut init, "se", 56, 4),
        transition: ConvBlock::new(&mut init, "transition", 56, 32, ConvOpts::same(1)),
    };
    let t = &msfs.transition;
    for id in [t.weight, t.bias, t.bn.unwrap().gamma] {
        store.get_mut(id).value.data_mut().fill(0.0);
    }
    let xv = random(Shape::new(2, 32, 4, 4), 1);
    let mut s = Session::new(&mut store, Mode::Train);
    let fused = s.graph.input(random(Shape::new(2, 56, 4, 4), 2));
    let x = s.graph.input(xv.clone());
    let y = msfs.forward(&mut s, fused, x).unwrap();
    assert_eq!(s.graph.value(y), &xv);
}

#[test]
fn module_preserves_shapes_and_counts_layers() {
    let mut store = ParamStore::<f32>::new();
    let m = GmsrfModule::new(&mut Init::new(&mut store, 0), 1, 32, 8, 3, 4).unwrap();
    let mut s = Session::new(&mut store, Mode::Train);
    let input = bundle(&mut s, 2, 32, 16, 0);
    let out = m.forward(&mut s, input).unwrap();
    for i in 0..4 {
        assert_eq!(s.graph.shape(out.0[i]), s.graph.shape(input.0[i]));
    }
    assert_eq!(s.stats.fusion_convs, 4 * 2);
    assert_eq!(s.stats.cmsa_maps, 4 * 2);
    assert_eq!(m.msfs[0].se.channels, 32 + 3 * 8);
}

#[test]
fn single_layer_module_has_no_fusion() {
    let mut store = ParamStore::<f32>::new();
    let m = GmsrfModule::new(&mut Init::new(&mut store, 0), 1, 6, 3, 1, 4).unwrap();
    assert!(m.fusion.is_empty());
    assert_eq!(m.msfs[2].se.channels, 6 + 3);
    let mut s = Session::new(&mut store, Mode::Train);
    let input = bundle(&mut s, 1, 6, 8, 3);
    let out = m.forward(&mut s, input).unwrap();
    assert_eq!(s.stats.fusion_convs, 0);
    assert_eq!(s.graph.shape(out.0[3]), Shape::new(1, 6, 1, 1));
}

#[test]
fn stacked_modules_compose() {
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(&mut store, 0);
    let a = GmsrfModule::new(&mut init, 1, 4, 2, 2, 4).unwrap();
    let b = GmsrfModule::new(&mut init, 2, 4, 2, 2, 4).unwrap();
    let mut s = Session::new(&mut store, Mode::Train);
    let input = bundle(&mut s, 1, 4, 8, 0);
    let mid = a.forward(&mut s, input).unwrap();
    let out = b.forward(&mut s, mid).unwrap();
    assert_eq!(s.graph.shape(out.0[0]), Shape::new(1, 4, 8, 8));
}

#[test]
fn module_rejects_bad_bundle() {
    let mut store = ParamStore::<f32>::new();
    let m = GmsrfModule::new(&mut Init::new(&mut store, 0), 1, 4, 2, 2, 4).unwrap();
    let mut s = Session::new(&mut store, Mode::Train);
    let mut input = bundle(&mut s, 1, 4, 8, 0);
    input.0[2] = s.graph.input(random(Shape::new(1, 4, 3, 3), 0));
    assert!(matches!(m.forward(&mut s, input), Err(Error::Shape(_))));
}

#[test]
fn module_config_errors() {
    let mut store = ParamStore::<f32>::new();
    let mut init = Init::new(&mut store, 0);
    assert!(matches!(GmsrfModule::new(&mut init, 1, 4, 2, 0, 4), Err(Error::Config(_))));
    assert!(matches!(GmsrfModule::new(&mut init, 2, 4, 0, 2, 4), Err(Error::Config(_))));
}

#[test]
fn other_scales_are_the_remaining_three() {
    for i in 1..=4 {
        let o = other_scales(i);
        assert!(!o.contains(&i));
        assert!(o.windows(2).all(|w| w[0] < w[1]));
    }
}

/// Zeroes every conv weight/bias and BN affine parameter outside the
/// squeeze-excitation blocks.
pub fn zero_branches(store: &mut ParamStore<f32>, prefix: &str) {
    for p in store.params_mut() {
        if p.name.starts_with(prefix) && !p.name.contains(".se.") {
            p.value.data_mut().fill(0.0);
        }
    }
}

#[test]
fn zeroed_branches_make_module_identity() {
    let mut store = ParamStore::<f32>::new();
    let m = GmsrfModule::new(&mut Init::new(&mut store, 0), 1, 8, 4, 3, 4).unwrap();
    zero_branches(&mut store, "gmsrf1.");
    let mut s = Session::new(&mut store, Mode::Train);
    let input = bundle(&mut s, 2, 8, 16, 7);
    let out = m.forward(&mut s, input).unwrap();
    for i in 0..4 {
        assert_eq!(s.graph.value(out.0[i]), s.graph.value(input.0[i]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fusion_widths_follow_channel_law(c0 in 1usize..9, k in 1usize..5, layers in 1usize..5) {
        let mut store = ParamStore::<f32>::new();
        let m = GmsrfModule::new(&mut Init::new(&mut store, 0), 1, c0, k, layers, 4).unwrap();
        let mut s = Session::new(&mut store, Mode::Train);
        let input = bundle(&mut s, 1, c0, 8, 0);
        m.forward(&mut s, input).unwrap();
        prop_assert_eq!(s.stats.fusion_input_widths.len(), 4 * (layers - 1));
        for &(_, l, _, width) in &s.stats.fusion_input_widths {
            prop_assert_eq!(width, c0 + (l - 1) * k + 3 * k);
        }
        prop_assert_eq!(s.stats.fusion_convs, 4 * (layers - 1));
        prop_assert_eq!(s.stats.cmsa_maps, 4 * (layers - 1));
    }
}

#[test]
fn tiny_module_gradcheck() {
    let r = gmsrf_module_check().unwrap();
    assert!(r.passed(), "{r:?}");
}
