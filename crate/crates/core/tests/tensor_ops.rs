use gmsrf_core::tensor::gradcheck::{finite_diff_gradcheck, DEFAULT_H_SCALE};
use gmsrf_core::tensor::kernels::{conv2d_reference, conv_transpose2d_reference};
use gmsrf_core::tensor::BatchNormState;
use gmsrf_core::{Activation, ConvSpec, Error, Graph, Mode, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t32(shape: [usize; 4], data: &[f32]) -> Tensor<f32> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn t64(shape: [usize; 4], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random64(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values in ±[0.05, 1], away from the relu kink.
fn random_off_kink(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

#[test]
fn conv2d_scalar_kernel_scales() {
    let mut g = Graph::new();
    let x = g.input(t32([1, 1, 2, 2], &[1., 2., 3., 4.]));
    let w = g.input(t32([1, 1, 1, 1], &[2.]));
    let b = g.input(t32([1, 1, 1, 1], &[0.]));
    let y = g.conv2d(x, w, Some(b), ConvSpec::new(1, 0)).unwrap();
    assert_eq!(g.value(y).data(), &[2., 4., 6., 8.]);
}

#[test]
fn conv2d_all_ones_matches_loop_oracle() {
    // Oracle: count of in-bounds taps per output position.
    let oracle = |h: usize, w: usize, p: isize| -> f32 {
        let mut n = 0;
        for dh in -1..=1isize {
            for dw in -1..=1isize {
                let ih = h as isize - p + 1 + dh;
                let iw = w as isize - p + 1 + dw;
                if (0..3).contains(&ih) && (0..3).contains(&iw) {
                    n += 1;
                }
            }
        }
        n as f32
    };
    let mut g = Graph::new();
    let x = g.input(Tensor::<f32>::ones([1, 1, 3, 3]));
    let w = g.input(Tensor::<f32>::ones([1, 1, 3, 3]));
    let y = g.conv2d(x, w, None, ConvSpec::new(1, 0)).unwrap();
    assert_eq!(g.value(y).shape(), Shape::new(1, 1, 1, 1));
    assert_eq!(g.value(y).data(), &[9.0]);
    assert_eq!(oracle(0, 0, 0), 9.0);

    let y = g.conv2d(x, w, None, ConvSpec::new(1, 1)).unwrap();
    let expected: Vec<f32> = (0..9).map(|i| oracle(i / 3, i % 3, 1)).collect();
    assert_eq!(expected, vec![4., 6., 4., 6., 9., 6., 4., 6., 4.]);
    assert_eq!(g.value(y).data(), expected.as_slice());
}

#[test]
fn conv2d_shape_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros([1, 2, 4, 4]));
    let w = g.input(Tensor::zeros([1, 3, 3, 3]));
    assert!(matches!(g.conv2d(x, w, None, ConvSpec::new(1, 1)), Err(Error::Shape(_))));
    let x = g.input(Tensor::zeros([1, 3, 2, 2]));
    assert!(matches!(g.conv2d(x, w, None, ConvSpec::new(1, 0)), Err(Error::Shape(_))));
}

#[test]
fn conv_transpose_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.input(t32([1, 1, 1, 1], &[1.]));
    let w = g.input(Tensor::ones([1, 1, 3, 3]));
    let y = g.conv_transpose2d(x, w, None, ConvSpec::new(2, 0)).unwrap();
    assert_eq!(g.value(y).shape(), Shape::new(1, 1, 3, 3));
    assert!(g.value(y).data().iter().all(|&v| v == 1.0));

    let x = g.input(Tensor::from_fn([1, 1, 3, 4], |[_, _, h, w]| (h * 4 + w) as f32));
    let id = g.input(Tensor::ones([1, 1, 1, 1]));
    let y = g.conv_transpose2d(x, id, None, ConvSpec::new(1, 0)).unwrap();
    assert_eq!(g.value(y), g.value(x));

    let x = g.input(Tensor::zeros([1, 2, 8, 8]));
    let w = g.input(Tensor::zeros([2, 3, 4, 4]));
    let y = g.conv_transpose2d(x, w, None, ConvSpec::new(2, 1)).unwrap();
    assert_eq!(g.value(y).shape(), Shape::new(1, 3, 16, 16));
}

#[test]
fn conv_transpose_matches_scatter_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random64([2, 3, 3, 4], &mut rng);
    let w = random64([3, 2, 4, 4], &mut rng);
    let b = random64([1, 2, 1, 1], &mut rng);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.conv_transpose2d(xv, wv, Some(bv), ConvSpec::new(2, 1)).unwrap();
    let oracle = conv_transpose2d_reference(&x, &w, Some(b.data()), 2, 1, 1).unwrap();
    assert!(g.value(y).max_abs_diff(&oracle) < 1e-12);
}

#[test]
fn conv_and_transpose_are_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Input sizes chosen so the transposed output recovers the input size.
    for &(k, s, p, size) in &[(3usize, 1usize, 1usize, 8usize), (3, 2, 1, 7), (4, 2, 1, 8), (1, 1, 0, 5)] {
        let x = random64([2, 3, size, size], &mut rng);
        let w = random64([4, 3, k, k], &mut rng);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let cx = g.conv2d(xv, wv, None, ConvSpec::new(s, p)).unwrap();
        let y = random64(g.value(cx).shape().dims(), &mut rng);
        let yv = g.input(y.clone());
        let ty = g.conv_transpose2d(yv, wv, None, ConvSpec::new(s, p)).unwrap();
        assert_eq!(g.value(ty).shape(), x.shape());
        let lhs = g.value(cx).dot(&y).unwrap();
        let rhs = x.dot(g.value(ty)).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "k={k} s={s}: {lhs} vs {rhs}");

        let x32: Tensor<f32> = x.cast();
        let w32: Tensor<f32> = w.cast();
        let y32: Tensor<f32> = y.cast();
        let mut g = Graph::new();
        let (xv, wv, yv) = (g.input(x32.clone()), g.input(w32), g.input(y32.clone()));
        let cx = g.conv2d(xv, wv, None, ConvSpec::new(s, p)).unwrap();
        let ty = g.conv_transpose2d(yv, wv, None, ConvSpec::new(s, p)).unwrap();
        let lhs = g.value(cx).dot(&y32).unwrap();
        let rhs = x32.dot(g.value(ty)).unwrap();
        assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(1.0));
    }
}

#[test]
fn concat_examples_and_slice_recovery() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Tensor::from_fn([1, 2, 4, 4], |[_, c, h, w]| (c * 100 + h * 4 + w) as f32));
    let b = g.input(Tensor::from_fn([1, 3, 4, 4], |[_, c, h, w]| -((c * 100 + h * 4 + w) as f32)));
    let y = g.concat_channels(&[a, b]).unwrap();
    assert_eq!(g.value(y).shape(), Shape::new(1, 5, 4, 4));
    let single = g.concat_channels(&[a]).unwrap();
    assert_eq!(g.value(single), g.value(a));
    // part j starts at the sum of preceding widths
    let sa = g.slice_channels(y, 0, 2).unwrap();
    let sb = g.slice_channels(y, 2, 3).unwrap();
    assert_eq!(g.value(sa), g.value(a));
    assert_eq!(g.value(sb), g.value(b));
    let bad = g.input(Tensor::zeros([1, 1, 3, 4]));
    assert!(matches!(g.concat_channels(&[a, bad]), Err(Error::Shape(_))));
    assert!(matches!(g.concat_channels(&[]), Err(Error::Shape(_))));
}

proptest! {
    #[test]
    fn concat_then_slice_is_bit_exact(n in 1usize..3, widths in prop::collection::vec(1usize..4, 1..5), h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f32>::new();
        let parts: Vec<_> = widths.iter().map(|&c| g.input(Tensor::from_fn([n, c, h, w], |_| rng.random::<f32>()))).collect();
        let y = g.concat_channels(&parts).unwrap();
        let mut offset = 0;
        for (&p, &c) in parts.iter().zip(&widths) {
            let s = g.slice_channels(y, offset, c).unwrap();
            prop_assert_eq!(g.value(s), g.value(p));
            offset += c;
        }
    }

    #[test]
    fn sigmoid_stays_in_open_unit_interval(v in prop::num::f32::NORMAL | prop::num::f32::ZERO | prop::num::f32::SUBNORMAL) {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::scalar(v));
        let y = g.sigmoid(x);
        let out = g.value(y).data()[0];
        prop_assert!(out > 0.0 && out < 1.0, "sigmoid({v}) = {out}");
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.input(t32([1, 1, 2, 2], &[1., 2., 3., 4.]));
    let ones = g.input(Tensor::ones([1, 1, 2, 2]));
    let zeros = g.input(Tensor::zeros([1, 1, 2, 2]));
    let twos = g.input(Tensor::full([1, 1, 2, 2], 2.0));
    let m = g.mul(x, ones).unwrap();
    assert_eq!(g.value(m), g.value(x));
    let a = g.add(x, zeros).unwrap();
    assert_eq!(g.value(a), g.value(x));
    let m = g.mul(x, twos).unwrap();
    assert_eq!(g.value(m).data(), &[2., 4., 6., 8.]);
    let other = g.input(Tensor::zeros([1, 1, 2, 3]));
    assert!(matches!(g.add(x, other), Err(Error::Shape(_))));
}

#[test]
fn activation_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.input(t32([1, 1, 1, 3], &[0., -1., 3.]));
    let s = g.sigmoid(x);
    assert_eq!(g.value(s).data()[0], 0.5);
    let r = g.relu(x);
    assert_eq!(&g.value(r).data()[1..], &[0., 3.]);
    let x = g.input(t32([1, 1, 1, 1], &[-2.]));
    let l = g.activation(x, Activation::LeakyRelu(0.1));
    assert!((g.value(l).data()[0] + 0.2).abs() < 1e-7);
}

#[test]
fn batch_norm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t64([2, 1, 1, 1], &[1., 3.]));
    let gamma = g.input(Tensor::ones([1, 1, 1, 1]));
    let beta = g.input(Tensor::zeros([1, 1, 1, 1]));
    let (y, mean, var) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
    let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert_eq!((mean[0], var[0]), (2.0, 1.0));
    assert!((g.value(y).data()[0] + expected).abs() < 1e-12);
    assert!((g.value(y).data()[1] - expected).abs() < 1e-12);
    assert!((expected - 0.99999).abs() < 1e-5);

    let x = g.input(t64([4, 1, 1, 1], &[-1., 1., -1., 1.]));
    let (y, _, _) = g.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(x)) < 1e-5);

    let zero_gamma = g.input(Tensor::zeros([1, 1, 1, 1]));
    let five = g.input(Tensor::full([1, 1, 1, 1], 5.0));
    let (y, _, _) = g.batch_norm_train(x, zero_gamma, five, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 5.0));
}

#[test]
fn batch_norm_eval_requires_training_first() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::ones([2, 3, 2, 2]));
    let gamma = g.input(Tensor::ones([1, 3, 1, 1]));
    let beta = g.input(Tensor::zeros([1, 3, 1, 1]));
    let mut state = BatchNormState::new(3);
    let err = g.batch_norm(x, gamma, beta, &mut state, Mode::Eval, 1e-5, 0.1).unwrap_err();
    assert!(matches!(err, Error::State(_)));
    g.batch_norm(x, gamma, beta, &mut state, Mode::Train, 1e-5, 0.1).unwrap();
    assert_eq!(state.tracked, 1);
    // running mean moved 10% toward the batch mean of 1
    assert!((state.mean[0] - 0.1).abs() < 1e-7);
    // unbiased batch variance is 0, so var decays from 1 to 0.9
    assert!((state.var[0] - 0.9).abs() < 1e-7);
    assert!(g.batch_norm(x, gamma, beta, &mut state, Mode::Eval, 1e-5, 0.1).is_ok());
}

#[test]
fn pool_linear_resize_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.input(t32([1, 1, 2, 2], &[1., 2., 3., 4.]));
    let p = g.global_avg_pool(x);
    assert_eq!(g.value(p).data(), &[2.5]);
    let c = g.input(Tensor::full([1, 2, 3, 3], 7.0));
    let p = g.global_avg_pool(c);
    assert_eq!(g.value(p).data(), &[7.0, 7.0]);

    let v = g.input(t32([1, 2, 1, 1], &[2., 3.]));
    let eye = g.input(t32([2, 2, 1, 1], &[1., 0., 0., 1.]));
    let zb = g.input(Tensor::zeros([1, 2, 1, 1]));
    let y = g.linear(v, eye, Some(zb)).unwrap();
    assert_eq!(g.value(y).data(), &[2., 3.]);
    let row = g.input(t32([1, 2, 1, 1], &[1., 1.]));
    let y = g.linear(v, row, None).unwrap();
    assert_eq!(g.value(y).data(), &[5.]);
    let zw = g.input(Tensor::zeros([2, 2, 1, 1]));
    let b = g.input(t32([1, 2, 1, 1], &[-1.5, 4.]));
    let y = g.linear(v, zw, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[-1.5, 4.]);
    let bad = g.input(Tensor::zeros([2, 3, 1, 1]));
    assert!(matches!(g.linear(v, bad, None), Err(Error::Shape(_))));

    let r = g.resize_bilinear(x, 2, 2).unwrap();
    assert_eq!(g.value(r), g.value(x));
    let cross = g.input(t32([1, 1, 2, 2], &[0., 1., 1., 0.]));
    let r = g.resize_bilinear(cross, 1, 1).unwrap();
    assert_eq!(g.value(r).data(), &[0.5]);
    for &(h, w) in &[(1, 1), (5, 7), (16, 3)] {
        let r = g.resize_bilinear(c, h, w).unwrap();
        assert!(g.value(r).data().iter().all(|&v| v == 7.0));
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.param(t64([1, 1, 1, 3], &[1., 2., 3.]));
    let y = g.input(t64([1, 1, 1, 3], &[4., -5., 6.]));
    let p = g.mul(x, y).unwrap();
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), g.value(y).data());
    assert!(g.grad(y).is_none());
    assert!(matches!(g.backward(loss), Err(Error::State(_))));

    let mut g = Graph::<f64>::new();
    let w = g.param(Tensor::scalar(0.0));
    let unused = g.param(Tensor::ones([1, 2, 1, 1]));
    let s = g.sigmoid(w);
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[0.25]);
    assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::ones([1, 1, 2, 2]));
    assert!(matches!(g.backward(x), Err(Error::Shape(_))));
}

#[test]
fn composite_conv_sigmoid_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random64([2, 3, 5, 5], &mut rng), random64([4, 3, 3, 3], &mut rng), random64([1, 4, 1, 1], &mut rng)];
    let report = finite_diff_gradcheck(
        |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 1))?;
            let s = g.sigmoid(y);
            Ok(g.sum(s))
        },
        &inputs,
        DEFAULT_H_SCALE,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn pipeline_conv_bn_sigmoid_mean_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let inputs = [
        random64([2, 2, 6, 6], &mut rng),
        random64([3, 2, 3, 3], &mut rng),
        Tensor::from_fn([1, 3, 1, 1], |_| rng.random_range(0.5..1.5)),
        random64([1, 3, 1, 1], &mut rng),
    ];
    let report = finite_diff_gradcheck(
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, ConvSpec::new(2, 1))?;
            let (y, _, _) = g.batch_norm_train(y, v[2], v[3], 1e-5)?;
            let s = g.sigmoid(y);
            Ok(g.mean(s))
        },
        &inputs,
        DEFAULT_H_SCALE,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{report:?}");
}

#[test]
fn relu_gradcheck_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_off_kink([2, 3, 4, 4], &mut rng);
    let c = random64([2, 3, 4, 4], &mut rng);
    for kind in [Activation::Relu, Activation::LeakyRelu(0.01)] {
        let report = finite_diff_gradcheck(
            |g, v| {
                let r = g.activation(v[0], kind);
                let cv = g.input(c.clone());
                let p = g.mul(r, cv)?;
                Ok(g.sum(p))
            },
            std::slice::from_ref(&x),
            DEFAULT_H_SCALE,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5);
    }
}

#[test]
fn mean_gradient_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::ones([1, 1, 3, 4]));
    let p = g.global_avg_pool(x);
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
}

#[test]
fn fast_conv_matches_reference_within_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x: Tensor<f32> = random64([2, 8, 12, 12], &mut rng).cast();
    let w: Tensor<f32> = random64([6, 8, 3, 3], &mut rng).cast();
    for spec in [ConvSpec::new(1, 1), ConvSpec::new(2, 1), ConvSpec::dilated(3, 3)] {
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let y = g.conv2d(xv, wv, None, spec).unwrap();
        let r = conv2d_reference(&x, &w, None, spec.stride, spec.padding, spec.dilation).unwrap();
        for (a, b) in g.value(y).data().iter().zip(r.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::<f32>::new();
        let x = g.input(random64([3, 4, 8, 8], &mut rng).cast());
        let w = g.input(random64([5, 4, 3, 3], &mut rng).cast());
        let y = g.conv2d(x, w, None, ConvSpec::new(1, 1)).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}
