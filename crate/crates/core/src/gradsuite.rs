//! Finite-difference gradient checks over primitive ops, composite blocks
//! and the whole network, all in 64-bit precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{ConvBlock, ConvOpts, Resampler, ResidualStage, Rfb, SqueezeExcite};
use crate::error::Result;
use crate::gmsrf::{other_scales, Cmsa, FusionLayer, GmsrfModule, Msfs, ScaleBundle};
use crate::loss::{total_loss, LossConfig};
use crate::network::{Model, ModelConfig};
use crate::params::{Init, ParamStore, Session};
use crate::tensor::gradcheck::{gradcheck_coords, GradcheckReport, DEFAULT_H_SCALE};
use crate::tensor::{Activation, ConvSpec, Graph, Mode, Shape, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const BLOCK_TOLERANCE: f64 = 1e-5;
pub const MODULE_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Op,
    Block,
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl TargetResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Gradient check of `f` with respect to `inputs` and every parameter in
/// `store`. Each evaluation runs on a fresh copy of the store so batch-norm
/// running statistics never leak between evaluations.
pub fn session_gradcheck<F>(
    store: &ParamStore<f64>,
    mode: Mode,
    inputs: &[Tensor<f64>],
    coords: Option<&[(usize, usize)]>,
    f: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Session<f64>, &[Var]) -> Result<Var>,
{
    let n_in = inputs.len();
    let mut all = inputs.to_vec();
    all.extend(store.params().iter().map(|p| p.value.clone()));
    gradcheck_coords(
        |g, vars| {
            let mut local = store.clone();
            let mut s = Session::with_graph(&mut local, mode, std::mem::take(g));
            for (id, &v) in store.ids().zip(&vars[n_in..]) {
                s.bind(id, v);
            }
            let out = f(&mut s, &vars[..n_in]);
            *g = std::mem::take(&mut s.graph);
            out
        },
        &all,
        DEFAULT_H_SCALE,
        coords,
    )
}

fn uniform(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values with magnitude in `[0.1, 1]`, far from activation kinks.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ r ⊙ y` with a fixed random `r`, so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(&mut rng, g.shape(y));
    let r = g.input(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

type OpCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = &mut rng;
    let s = Shape::new;
    vec![
        (
            "conv2d",
            vec![uniform(r, s(2, 3, 5, 5)), uniform(r, s(4, 3, 3, 3)), uniform(r, Shape::vector(4))],
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), ConvSpec::new(1, 1))?;
                project(g, y, 1)
            }),
        ),
        (
            "conv2d_strided_dilated",
            vec![uniform(r, s(1, 2, 7, 7)), uniform(r, s(3, 2, 3, 3))],
            Box::new(|g, v| {
                let y = g.conv2d(v[0], v[1], None, ConvSpec { stride: 2, padding: 2, dilation: 2 })?;
                project(g, y, 2)
            }),
        ),
        (
            "conv_transpose2d",
            vec![uniform(r, s(2, 3, 3, 3)), uniform(r, s(3, 2, 4, 4)), uniform(r, Shape::vector(2))],
            Box::new(|g, v| {
                let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), ConvSpec::new(2, 1))?;
                project(g, y, 3)
            }),
        ),
        (
            "concat_slice",
            vec![uniform(r, s(2, 2, 3, 3)), uniform(r, s(2, 3, 3, 3))],
            Box::new(|g, v| {
                let c = g.concat_channels(&[v[0], v[1]])?;
                let y = g.slice_channels(c, 1, 3)?;
                project(g, y, 4)
            }),
        ),
        (
            "add_mul",
            vec![uniform(r, s(2, 2, 3, 3)), uniform(r, s(2, 2, 3, 3))],
            Box::new(|g, v| {
                let a = g.add(v[0], v[1])?;
                let y = g.mul(a, v[1])?;
                project(g, y, 5)
            }),
        ),
        (
            "scale_channels",
            vec![uniform(r, s(2, 3, 3, 3)), uniform(r, s(2, 3, 1, 1))],
            Box::new(|g, v| {
                let y = g.scale_channels(v[0], v[1])?;
                project(g, y, 6)
            }),
        ),
        (
            "relu",
            vec![away_from_zero(r, s(2, 3, 4, 4))],
            Box::new(|g, v| {
                let y = g.relu(v[0]);
                project(g, y, 7)
            }),
        ),
        (
            "leaky_relu",
            vec![away_from_zero(r, s(2, 3, 4, 4))],
            Box::new(|g, v| {
                let y = g.activation(v[0], Activation::LeakyRelu(0.1));
                project(g, y, 8)
            }),
        ),
        (
            "sigmoid",
            vec![uniform(r, s(2, 3, 4, 4)).map(|x| 3.0 * x)],
            Box::new(|g, v| {
                let y = g.sigmoid(v[0]);
                project(g, y, 9)
            }),
        ),
        (
            "batch_norm_train",
            vec![uniform(r, s(2, 3, 4, 4)), uniform(r, Shape::vector(3)), uniform(r, Shape::vector(3))],
            Box::new(|g, v| {
                let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                project(g, y, 10)
            }),
        ),
        (
            "batch_norm_eval",
            vec![uniform(r, s(2, 3, 4, 4)), uniform(r, Shape::vector(3)), uniform(r, Shape::vector(3))],
            Box::new(|g, v| {
                let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)?;
                project(g, y, 11)
            }),
        ),
        (
            "global_avg_pool",
            vec![uniform(r, s(2, 3, 4, 5))],
            Box::new(|g, v| {
                let y = g.global_avg_pool(v[0]);
                project(g, y, 12)
            }),
        ),
        (
            "linear",
            vec![uniform(r, s(2, 4, 1, 1)), uniform(r, s(3, 4, 1, 1)), uniform(r, Shape::vector(3))],
            Box::new(|g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                project(g, y, 13)
            }),
        ),
        (
            "resize_bilinear_up",
            vec![uniform(r, s(2, 2, 3, 4))],
            Box::new(|g, v| {
                let y = g.resize_bilinear(v[0], 7, 9)?;
                project(g, y, 14)
            }),
        ),
        (
            "resize_bilinear_down",
            vec![uniform(r, s(1, 2, 6, 6))],
            Box::new(|g, v| {
                let y = g.resize_bilinear(v[0], 4, 3)?;
                project(g, y, 15)
            }),
        ),
        ("bce_loss", vec![uniform(r, s(2, 1, 4, 4))], Box::new(|g, v| loss_case(g, v[0], false))),
        ("soft_iou_loss", vec![uniform(r, s(2, 1, 4, 4))], Box::new(|g, v| loss_case(g, v[0], true))),
        (
            "mean",
            vec![uniform(r, s(2, 2, 3, 3))],
            Box::new(|g, v| {
                let y = g.mul(v[0], v[0])?;
                Ok(g.mean(y))
            }),
        ),
    ]
}

fn loss_case(g: &mut Graph<f64>, logits: Var, iou: bool) -> Result<Var> {
    let p = g.sigmoid(logits);
    let shape = g.shape(p);
    let target = Tensor::from_fn(shape, |[n, _, h, w]| ((n + h * 3 + w) % 3 == 0) as u8 as f64);
    if iou {
        g.soft_iou_loss(p, &target, None, 1.0)
    } else {
        g.bce_loss(p, &target, None)
    }
}

fn result(name: &str, report: GradcheckReport, tolerance: f64) -> TargetResult {
    TargetResult { name: name.into(), max_rel_error: report.max_rel_error, tolerance, checked: report.checked }
}

pub fn op_suite() -> Result<Vec<TargetResult>> {
    op_cases()
        .into_iter()
        .map(|(name, inputs, f)| {
            let report = gradcheck_coords(|g, v| f(g, v), &inputs, DEFAULT_H_SCALE, None)?;
            Ok(result(name, report, OP_TOLERANCE))
        })
        .collect()
}

/// Builds parameters with `build`, then checks `run` against inputs.
fn block_case<B>(
    name: &str,
    seed: u64,
    inputs: Vec<Tensor<f64>>,
    tolerance: f64,
    build: impl FnOnce(&mut Init<f64>) -> B,
    run: impl Fn(&B, &mut Session<f64>, &[Var]) -> Result<Var>,
) -> Result<TargetResult> {
    let mut store = ParamStore::new();
    let block = build(&mut Init::new(&mut store, seed));
    let report = session_gradcheck(&store, Mode::Train, &inputs, None, |s, v| {
        let y = run(&block, s, v)?;
        project(&mut s.graph, y, seed)
    })?;
    Ok(result(name, report, tolerance))
}

fn bundle_inputs(rng: &mut ChaCha8Rng, n: usize, c0: usize, base: usize) -> Vec<Tensor<f64>> {
    (0..4).map(|i| uniform(rng, Shape::new(n, c0, base >> i, base >> i))).collect()
}

pub fn block_suite() -> Result<Vec<TargetResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let r = &mut rng;
    let s = Shape::new;
    let mut out = vec![
        block_case(
            "conv_block",
            1,
            vec![uniform(r, s(2, 2, 5, 5))],
            BLOCK_TOLERANCE,
            |i| ConvBlock::new(i, "c", 2, 3, ConvOpts::same(3)),
            |b, s, v| b.forward(s, v[0]),
        )?,
        block_case(
            "squeeze_excite",
            2,
            vec![uniform(r, s(2, 6, 3, 3))],
            BLOCK_TOLERANCE,
            |i| SqueezeExcite::new(i, "se", 6, 2),
            |b, s, v| b.forward(s, v[0]),
        )?,
        block_case(
            "resample_up",
            3,
            vec![uniform(r, s(2, 2, 2, 2))],
            BLOCK_TOLERANCE,
            |i| Resampler::new(i, "r", 3, 1, 2),
            |b, s, v| b.forward(s, v[0], 8),
        )?,
        block_case(
            "resample_down",
            4,
            vec![uniform(r, s(2, 2, 8, 8))],
            BLOCK_TOLERANCE,
            |i| Resampler::new(i, "r", 1, 3, 2),
            |b, s, v| b.forward(s, v[0], 8),
        )?,
        block_case(
            "rfb",
            5,
            vec![uniform(r, s(2, 3, 6, 6))],
            BLOCK_TOLERANCE,
            |i| Rfb::new(i, "rfb", 3, 4),
            |b, s, v| b.forward(s, v[0]),
        )?,
        block_case(
            "residual_stage",
            6,
            vec![uniform(r, s(2, 2, 6, 6))],
            BLOCK_TOLERANCE,
            |i| ResidualStage::new(i, "st", 2, 3, true),
            |b, s, v| b.forward(s, v[0]),
        )?,
        block_case(
            "cmsa",
            7,
            vec![uniform(r, s(2, 2, 4, 4)), uniform(r, s(2, 2, 2, 2)), uniform(r, s(2, 2, 1, 1))],
            BLOCK_TOLERANCE,
            |i| Cmsa::new(i, 1, 2),
            |b, s, v| b.forward(s, [v[0], v[1], v[2]], 8),
        )?,
    ];
    out.push(block_case(
        "gmsrf_fusion_layer",
        8,
        vec![
            uniform(r, s(2, 4, 4, 4)),
            uniform(r, s(2, 2, 4, 4)),
            uniform(r, s(2, 2, 8, 8)),
            uniform(r, s(2, 2, 2, 2)),
            uniform(r, s(2, 2, 1, 1)),
        ],
        BLOCK_TOLERANCE,
        |i| FusionLayer {
            layer: 2,
            cmsa: Cmsa::new(i, 2, 2),
            conv: ConvBlock::new(i, "fuse", crate::gmsrf::fusion_input_width(4, 2, 2), 2, ConvOpts::same(3)),
        },
        |b, s, v| {
            let others = other_scales(2).map(|j| match j {
                1 => v[2],
                3 => v[3],
                _ => v[4],
            });
            let resampled = b.cmsa.resample(s, others, 8)?;
            let att = b.cmsa.attend(s, resampled)?;
            let fused = b.fuse(s, &[v[0], v[1]], resampled)?;
            crate::gmsrf::apply_attention(s, fused, att)
        },
    )?);
    out.push(block_case(
        "msfs_transition",
        9,
        vec![uniform(r, s(2, 8, 3, 3)), uniform(r, s(2, 4, 3, 3))],
        BLOCK_TOLERANCE,
        |i| Msfs {
            se: SqueezeExcite::new(i, "se", 8, 4),
            transition: ConvBlock::new(i, "transition", 8, 4, ConvOpts::same(1)),
        },
        |b, s, v| b.forward(s, v[0], v[1]),
    )?);
    out.push(gmsrf_module_check()?);
    Ok(out)
}

/// Tiny module: C0 = 4, k = 2, L = 2, scale sides 8/4/2/1.
pub fn gmsrf_module_check() -> Result<TargetResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    block_case(
        "gmsrf_module",
        10,
        bundle_inputs(&mut rng, 2, 4, 8),
        MODULE_TOLERANCE,
        |i| GmsrfModule::new(i, 1, 4, 2, 2, 4).expect("valid module config"),
        |m, s, v| {
            let out = m.forward(s, ScaleBundle([v[0], v[1], v[2], v[3]]))?;
            let parts = out.0.map(|x| s.graph.mean(x));
            let a = s.graph.add(parts[0], parts[1])?;
            let b = s.graph.add(parts[2], parts[3])?;
            s.graph.add(a, b)
        },
    )
}

/// End-to-end check of a network: total loss of a batch of two images with
/// respect to every image pixel and every parameter.
pub fn model_check(config: &ModelConfig) -> Result<TargetResult> {
    let model = Model::<f64>::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let size = config.input_size;
    let image = Tensor::from_fn(Shape::new(2, 3, size, size), |_| rng.random_range(0.0..1.0));
    let target = Tensor::from_fn(Shape::new(2, 1, size, size), |[n, _, h, w]| {
        let (dy, dx) = (h as f64 - size as f64 / 2.0, w as f64 - size as f64 / 2.0 - n as f64 * 3.0);
        (dy * dy + dx * dx < (size * size) as f64 / 16.0) as u8 as f64
    });
    let net = &model.net;
    let report = session_gradcheck(&model.store, Mode::Train, &[image], None, |s, v| {
        let maps = net.forward(s, v[0])?;
        total_loss(&mut s.graph, &maps, &target, &LossConfig::default())
    })?;
    Ok(result("model_micro", report, MODULE_TOLERANCE))
}

pub fn run(scope: Scope) -> Result<Vec<TargetResult>> {
    match scope {
        Scope::Op => op_suite(),
        Scope::Block => block_suite(),
        Scope::Model => Ok(vec![model_check(&ModelConfig::micro())?]),
    }
}
