use super::kernels::{self, ConvGeom};
use super::{Real, Shape, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride, zero padding, and dilation of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        ConvSpec { stride, padding, dilation: 1 }
    }

    pub const fn dilated(padding: usize, dilation: usize) -> Self {
        ConvSpec { stride: 1, padding, dilation }
    }

    /// Size-preserving spec for an odd kernel at stride 1.
    pub const fn same(kernel: usize) -> Self {
        ConvSpec::new(1, kernel / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    /// The default hidden-layer activation.
    pub const LEAKY: Activation = Activation::LeakyRelu(0.01);
}

/// Running statistics of a batch-normalisation layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of training batches folded into the running statistics.
    pub tracked: u64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState { mean: vec![T::zero(); channels], var: vec![T::one(); channels], tracked: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    /// `geom` describes the forward convolution whose adjoint this is.
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    AvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Resize(Var),
    Bce {
        pred: Var,
        target: Tensor<T>,
        weight: Option<Tensor<T>>,
    },
    SoftIou {
        pred: Var,
        target: Tensor<T>,
        weight: Option<Tensor<T>>,
        eps: f64,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording tape. Nodes are stored in recording order, which is also a
/// topological order; [`Graph::backward`] walks them in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Lower clamp applied to probabilities inside the cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Gradient after [`Graph::backward`]. Always `None` for values that do not
    /// require a gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.c != ws.c {
            return Err(shape_err!("conv2d: input has {} channels but weight {ws} expects {}", xs.c, ws.c));
        }
        self.check_bias(b, ws.n, "conv2d")?;
        let geom = ConvGeom {
            cin: xs.c,
            h: xs.h,
            w: xs.w,
            cout: ws.n,
            ho: kernels::conv_out_len(xs.h, ws.h, spec.stride, spec.padding, spec.dilation)?,
            wo: kernels::conv_out_len(xs.w, ws.w, spec.stride, spec.padding, spec.dilation)?,
            kh: ws.h,
            kw: ws.w,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
        };
        let y = kernels::conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b).data()), &geom);
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(y, Op::Conv { x, w, b, geom }, &inputs))
    }

    /// Transposed convolution; `w` is (in_channels, out_channels, kh, kw).
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.c != ws.n {
            return Err(shape_err!("conv_transpose2d: input has {} channels but weight {ws} expects {}", xs.c, ws.n));
        }
        self.check_bias(b, ws.c, "conv_transpose2d")?;
        let geom = ConvGeom {
            cin: ws.c,
            h: kernels::conv_transpose_out_len(xs.h, ws.h, spec.stride, spec.padding, spec.dilation)?,
            w: kernels::conv_transpose_out_len(xs.w, ws.w, spec.stride, spec.padding, spec.dilation)?,
            cout: ws.n,
            ho: xs.h,
            wo: xs.w,
            kh: ws.h,
            kw: ws.w,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
        };
        let mut y = kernels::conv_backward_input(self.value(x), self.value(w), &geom);
        if let Some(b) = b {
            let plane = geom.h * geom.w;
            let bias = self.value(b).data().to_vec();
            for (i, chan) in y.data_mut().chunks_mut(plane).enumerate() {
                let bv = bias[i % geom.cin];
                chan.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(y, Op::ConvTranspose { x, w, b, geom }, &inputs))
    }

    fn check_bias(&self, b: Option<Var>, channels: usize, op: &str) -> Result<()> {
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs.numel() != channels {
                return Err(shape_err!("{op}: bias {bs} does not have {channels} entries"));
            }
        }
        Ok(())
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| shape_err!("concat_channels: empty list"))?);
        let mut c = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(shape_err!("concat_channels: {s} incompatible with {first}"));
            }
            c += s.c;
        }
        let out_shape = Shape::new(first.n, c, first.h, first.w);
        let mut data = Vec::with_capacity(out_shape.numel());
        for n in 0..first.n {
            for &p in parts {
                let v = self.value(p);
                let item = v.shape().item();
                data.extend_from_slice(&v.data()[n * item..(n + 1) * item]);
            }
        }
        let y = Tensor::new(out_shape, data)?;
        Ok(self.push(y, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `start..start+len` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.c || len == 0 {
            return Err(shape_err!("slice_channels: range {start}..{} invalid for {s}", start + len));
        }
        let plane = s.plane();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = n * s.item() + start * plane;
            data.extend_from_slice(&src[base..base + len * plane]);
        }
        let y = Tensor::new(Shape::new(s.n, len, s.h, s.w), data)?;
        Ok(self.push(y, Op::Slice { x, start }, &[x]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err!("{op}: shapes {sa} and {sb} differ"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let y = Tensor::new(self.shape(a), data)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let y = Tensor::new(self.shape(a), data)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    /// `y[n,c,h,w] = x[n,c,h,w] * gate[n,c]` with `gate` shaped (N, C, 1, 1).
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x);
        let gs = self.shape(gate);
        if gs != Shape::new(xs.n, xs.c, 1, 1) {
            return Err(shape_err!("scale_channels: gate {gs} does not broadcast over {xs}"));
        }
        let g = self.value(gate).data();
        let plane = xs.plane();
        let data = self.value(x).data().iter().enumerate().map(|(i, &v)| v * g[i / plane]).collect();
        let y = Tensor::new(xs, data)?;
        Ok(self.push(y, Op::ScaleChannels { x, gate }, &[x, gate]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let y = match kind {
            Activation::Identity => self.value(x).clone(),
            Activation::Relu => self.value(x).map(|v| v.max(T::zero())),
            Activation::LeakyRelu(alpha) => {
                let a = T::from_f64(alpha);
                self.value(x).map(|v| if v > T::zero() { v } else { v * a })
            }
            Activation::Sigmoid => self.value(x).map(sigmoid),
        };
        self.push(y, Op::Act { x, kind }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    fn check_bn_params(&self, x: Var, gamma: Var, beta: Var) -> Result<()> {
        let c = self.shape(x).c;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v).numel() != c {
                return Err(shape_err!("batch_norm: {name} {} does not have {c} entries", self.shape(v)));
            }
        }
        Ok(())
    }

    /// Batch normalisation with batch statistics over (N, H, W).
    ///
    /// Returns the output together with each channel's batch mean and biased
    /// variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        self.check_bn_params(x, gamma, beta)?;
        let s = self.shape(x);
        let plane = s.plane();
        let count = (s.n * plane) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0f64; s.c];
        let mut var = vec![0.0f64; s.c];
        for n in 0..s.n {
            for (c, m) in mean.iter_mut().enumerate() {
                let base = (n * s.c + c) * plane;
                *m += xv[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for n in 0..s.n {
            for c in 0..s.c {
                let base = (n * s.c + c) * plane;
                var[c] += xv[base..base + plane]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mean[c];
                        d * d
                    })
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
        let (xhat, y) = self.normalize(x, gamma, beta, &mean_t, &inv_std);
        let out = self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: true }, &[x, gamma, beta]);
        Ok((out, mean, var))
    }

    /// Batch normalisation with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        self.check_bn_params(x, gamma, beta)?;
        let c = self.shape(x).c;
        if mean.len() != c || var.len() != c {
            return Err(shape_err!("batch_norm: running statistics do not have {c} entries"));
        }
        let inv_std: Vec<T> = var.iter().map(|v| T::from_f64(1.0 / (v.as_f64() + eps).sqrt())).collect();
        let (xhat, y) = self.normalize(x, gamma, beta, mean, &inv_std);
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false }, &[x, gamma, beta]))
    }

    fn normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> (Vec<T>, Tensor<T>) {
        let s = self.shape(x);
        let plane = s.plane();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let xv = self.value(x).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut y = Vec::with_capacity(xv.len());
        for (i, &v) in xv.iter().enumerate() {
            let c = (i / plane) % s.c;
            let h = (v - mean[c]) * inv_std[c];
            xhat.push(h);
            y.push(g[c] * h + b[c]);
        }
        (xhat, Tensor::new(s, y).expect("batch_norm output"))
    }

    /// Batch normalisation that reads and updates `state`.
    ///
    /// In training mode the running statistics are blended with the batch
    /// statistics (`momentum` weight on the new value, unbiased variance).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let s = self.shape(x);
                if state.mean.len() != s.c {
                    return Err(shape_err!("batch_norm: state does not have {} channels", s.c));
                }
                let (y, mean, var) = self.batch_norm_train(x, gamma, beta, eps)?;
                let count = (s.n * s.plane()) as f64;
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                for c in 0..s.c {
                    let m = state.mean[c].as_f64();
                    let v = state.var[c].as_f64();
                    state.mean[c] = T::from_f64((1.0 - momentum) * m + momentum * mean[c]);
                    state.var[c] = T::from_f64((1.0 - momentum) * v + momentum * var[c] * unbias);
                }
                state.tracked += 1;
                Ok(y)
            }
            Mode::Eval => {
                if state.tracked == 0 {
                    return Err(Error::State("batch_norm: evaluation requested before any training step".into()));
                }
                self.batch_norm_eval(x, gamma, beta, &state.mean, &state.var, eps)
            }
        }
    }

    /// Per-channel spatial mean, shaped (N, C, 1, 1).
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let plane = s.plane();
        let inv = 1.0 / plane as f64;
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| T::from_f64(p.iter().map(|v| v.as_f64()).sum::<f64>() * inv))
            .collect();
        let y = Tensor::new(Shape::new(s.n, s.c, 1, 1), data).expect("pool output");
        self.push(y, Op::AvgPool(x), &[x])
    }

    /// Affine map over channels; `x` is (N, Cin, 1, 1), `w` holds Cout×Cin values.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.h != 1 || xs.w != 1 {
            return Err(shape_err!("linear: input {xs} must be (N, C, 1, 1)"));
        }
        if ws.c != xs.c || ws.h * ws.w != 1 {
            return Err(shape_err!("linear: weight {ws} incompatible with input {xs}"));
        }
        let cout = ws.n;
        self.check_bias(b, cout, "linear")?;
        let mut y = Tensor::zeros(Shape::new(xs.n, cout, 1, 1));
        T::gemm(
            xs.n,
            xs.c,
            cout,
            T::one(),
            self.value(x).data(),
            (xs.c as isize, 1),
            self.value(w).data(),
            (1, xs.c as isize),
            T::zero(),
            y.data_mut(),
            (cout as isize, 1),
        );
        if let Some(b) = b {
            let bias = self.value(b).data().to_vec();
            for (i, v) in y.data_mut().iter_mut().enumerate() {
                *v = *v + bias[i % cout];
            }
        }
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(y, Op::Linear { x, w, b }, &inputs))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(shape_err!("resize_bilinear: target size {out_h}x{out_w}"));
        }
        let y = kernels::resize_bilinear_forward(self.value(x), out_h, out_w);
        Ok(self.push(y, Op::Resize(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(T::from_f64(total)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        self.push(Tensor::scalar(T::from_f64(m)), Op::Mean(x), &[x])
    }

    fn check_target(&self, pred: Var, target: &Tensor<T>, weight: Option<&Tensor<T>>, op: &str) -> Result<()> {
        let ps = self.shape(pred);
        if target.shape() != ps {
            return Err(shape_err!("{op}: target {} vs prediction {ps}", target.shape()));
        }
        if let Some(w) = weight {
            if w.shape() != ps {
                return Err(shape_err!("{op}: weight map {} vs prediction {ps}", w.shape()));
            }
        }
        Ok(())
    }

    /// (Weighted) mean binary cross-entropy of probabilities against a target.
    pub fn bce_loss(&mut self, pred: Var, target: &Tensor<T>, weight: Option<&Tensor<T>>) -> Result<Var> {
        self.check_target(pred, target, weight, "bce_loss")?;
        let p = self.value(pred).data();
        let t = target.data();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..p.len() {
            let w = weight.map(|w| w.data()[i].as_f64()).unwrap_or(1.0);
            let pc = p[i].as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            let tv = t[i].as_f64();
            num += -w * (tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln());
            den += w;
        }
        let loss = if den > 0.0 { num / den } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::Bce { pred, target: target.clone(), weight: weight.cloned() },
            &[pred],
        ))
    }

    /// Soft intersection-over-union loss, per image, averaged over the batch.
    pub fn soft_iou_loss(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        weight: Option<&Tensor<T>>,
        eps: f64,
    ) -> Result<Var> {
        self.check_target(pred, target, weight, "soft_iou_loss")?;
        let s = self.shape(pred);
        let item = s.item();
        let p = self.value(pred).data();
        let mut total = 0.0;
        for n in 0..s.n {
            let (inter, union) = iou_terms(p, target.data(), weight.map(|w| w.data()), n * item, item);
            total += 1.0 - (inter + eps) / (union + eps);
        }
        let loss = total / s.n as f64;
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::SoftIou { pred, target: target.clone(), weight: weight.cloned(), eps },
            &[pred],
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Afterwards every value that requires a gradient and is a leaf holds
    /// one (zero if unreachable). A graph supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward: graph already consumed".into()));
        }
        let ls = self.shape(loss);
        if ls != Shape::scalar() {
            return Err(shape_err!("backward: loss must be 1x1x1x1, got {ls}"));
        }
        self.consumed = true;
        if self.nodes[loss.0].requires_grad {
            self.nodes[loss.0].grad = Some(Tensor::ones(ls));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.vjp(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dg) in contributions {
                self.accumulate(v, dg);
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a = *a + b),
            None => node.grad = Some(g),
        }
    }

    /// Vector-Jacobian products of node `i` for each input needing a gradient.
    fn vjp(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                if rg(*x) {
                    let mut dx = kernels::conv_backward_input(g, val(*w), geom);
                    if kernels::conv_grad_corrupted() {
                        let k = T::from_f64(1.01);
                        dx.data_mut().iter_mut().for_each(|v| *v = *v * k);
                    }
                    out.push((*x, dx));
                }
                if rg(*w) {
                    out.push((*w, kernels::conv_backward_weight(g, val(*x), geom)));
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    out.push((b, vector_like(val(b), kernels::channel_sums(g))));
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                if rg(*x) {
                    out.push((*x, kernels::conv_forward(g, val(*w), None, geom)));
                }
                if rg(*w) {
                    out.push((*w, kernels::conv_backward_weight(val(*x), g, geom)));
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    out.push((b, vector_like(val(b), kernels::channel_sums(g))));
                }
            }
            Op::Concat(parts) => {
                let s = g.shape();
                let plane = s.plane();
                let mut offset = 0;
                for &p in parts {
                    let ps = val(p).shape();
                    if rg(p) {
                        let mut data = Vec::with_capacity(ps.numel());
                        for n in 0..s.n {
                            let base = n * s.item() + offset * plane;
                            data.extend_from_slice(&g.data()[base..base + ps.c * plane]);
                        }
                        out.push((p, Tensor::new(ps, data).expect("concat grad")));
                    }
                    offset += ps.c;
                }
            }
            Op::Slice { x, start } => {
                if rg(*x) {
                    let xs = val(*x).shape();
                    let gs = g.shape();
                    let plane = xs.plane();
                    let mut dx = Tensor::zeros(xs);
                    for n in 0..xs.n {
                        let dst = n * xs.item() + start * plane;
                        let src = n * gs.item();
                        dx.data_mut()[dst..dst + gs.item()].copy_from_slice(&g.data()[src..src + gs.item()]);
                    }
                    out.push((*x, dx));
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    out.push((*a, g.clone()));
                }
                if rg(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    out.push((*a, zip_map(g, val(*b), |gv, bv| gv * bv)));
                }
                if rg(*b) {
                    out.push((*b, zip_map(g, val(*a), |gv, av| gv * av)));
                }
            }
            Op::ScaleChannels { x, gate } => {
                let xs = val(*x).shape();
                let plane = xs.plane();
                if rg(*x) {
                    let gd = val(*gate).data();
                    let data = g.data().iter().enumerate().map(|(i, &v)| v * gd[i / plane]).collect();
                    out.push((*x, Tensor::new(xs, data).expect("scale grad")));
                }
                if rg(*gate) {
                    let data = g
                        .data()
                        .chunks(plane)
                        .zip(val(*x).data().chunks(plane))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>())
                        .collect();
                    out.push((*gate, Tensor::new(val(*gate).shape(), data).expect("gate grad")));
                }
            }
            Op::Act { x, kind } => {
                if rg(*x) {
                    let dx = match kind {
                        Activation::Identity => g.clone(),
                        Activation::Relu => zip_map(g, val(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() }),
                        Activation::LeakyRelu(alpha) => {
                            let a = T::from_f64(*alpha);
                            zip_map(g, val(*x), |gv, xv| if xv > T::zero() { gv } else { gv * a })
                        }
                        Activation::Sigmoid => zip_map(g, &node.value, |gv, y| gv * y * (T::one() - y)),
                    };
                    out.push((*x, dx));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let s = val(*x).shape();
                let plane = s.plane();
                let count = (s.n * plane) as f64;
                let mut sum_g = vec![0.0f64; s.c];
                let mut sum_gx = vec![0.0f64; s.c];
                for (idx, (&gv, &h)) in g.data().iter().zip(xhat).enumerate() {
                    let c = (idx / plane) % s.c;
                    sum_g[c] += gv.as_f64();
                    sum_gx[c] += gv.as_f64() * h.as_f64();
                }
                if rg(*gamma) {
                    out.push((*gamma, vector_like(val(*gamma), sum_gx.iter().map(|&v| T::from_f64(v)).collect())));
                }
                if rg(*beta) {
                    out.push((*beta, vector_like(val(*beta), sum_g.iter().map(|&v| T::from_f64(v)).collect())));
                }
                if rg(*x) {
                    let gam = val(*gamma).data();
                    let data = g
                        .data()
                        .iter()
                        .zip(xhat)
                        .enumerate()
                        .map(|(idx, (&gv, &h))| {
                            let c = (idx / plane) % s.c;
                            let scale = gam[c].as_f64() * inv_std[c].as_f64();
                            if *train {
                                let v = gv.as_f64() - sum_g[c] / count - h.as_f64() * sum_gx[c] / count;
                                T::from_f64(scale * v)
                            } else {
                                T::from_f64(scale * gv.as_f64())
                            }
                        })
                        .collect();
                    out.push((*x, Tensor::new(s, data).expect("bn grad")));
                }
            }
            Op::AvgPool(x) => {
                if rg(*x) {
                    let xs = val(*x).shape();
                    let plane = xs.plane();
                    let inv = T::from_f64(1.0 / plane as f64);
                    let gd = g.data();
                    let dx = Tensor::from_fn(xs, |[n, c, _, _]| gd[n * xs.c + c] * inv);
                    out.push((*x, dx));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = val(*x).shape();
                let cout = g.shape().c;
                if rg(*x) {
                    let mut dx = Tensor::zeros(xs);
                    T::gemm(
                        xs.n,
                        cout,
                        xs.c,
                        T::one(),
                        g.data(),
                        (cout as isize, 1),
                        val(*w).data(),
                        (xs.c as isize, 1),
                        T::zero(),
                        dx.data_mut(),
                        (xs.c as isize, 1),
                    );
                    out.push((*x, dx));
                }
                if rg(*w) {
                    let mut dw = Tensor::zeros(val(*w).shape());
                    T::gemm(
                        cout,
                        xs.n,
                        xs.c,
                        T::one(),
                        g.data(),
                        (1, cout as isize),
                        val(*x).data(),
                        (xs.c as isize, 1),
                        T::zero(),
                        dw.data_mut(),
                        (xs.c as isize, 1),
                    );
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| rg(*b)) {
                    out.push((b, vector_like(val(b), kernels::channel_sums(g))));
                }
            }
            Op::Resize(x) => {
                if rg(*x) {
                    out.push((*x, kernels::resize_bilinear_backward(g, val(*x).shape())));
                }
            }
            Op::Bce { pred, target, weight } => {
                if rg(*pred) {
                    let g0 = g.data()[0].as_f64();
                    let p = val(*pred).data();
                    let den: f64 = match weight {
                        Some(w) => w.data().iter().map(|v| v.as_f64()).sum(),
                        None => p.len() as f64,
                    };
                    let data = (0..p.len())
                        .map(|i| {
                            let pv = p[i].as_f64();
                            if den <= 0.0 || !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&pv) {
                                return T::zero();
                            }
                            let w = weight.as_ref().map(|w| w.data()[i].as_f64()).unwrap_or(1.0);
                            let t = target.data()[i].as_f64();
                            T::from_f64(g0 * w * (-t / pv + (1.0 - t) / (1.0 - pv)) / den)
                        })
                        .collect();
                    out.push((*pred, Tensor::new(val(*pred).shape(), data).expect("bce grad")));
                }
            }
            Op::SoftIou { pred, target, weight, eps } => {
                if rg(*pred) {
                    let g0 = g.data()[0].as_f64();
                    let s = val(*pred).shape();
                    let item = s.item();
                    let p = val(*pred).data();
                    let t = target.data();
                    let wd = weight.as_ref().map(|w| w.data());
                    let mut data = Vec::with_capacity(p.len());
                    for n in 0..s.n {
                        let (inter, union) = iou_terms(p, t, wd, n * item, item);
                        let a = inter + eps;
                        let b = union + eps;
                        for j in n * item..(n + 1) * item {
                            let w = wd.map(|w| w[j].as_f64()).unwrap_or(1.0);
                            let tj = t[j].as_f64();
                            let d_ratio = w * (tj * b - a * (1.0 - tj)) / (b * b);
                            data.push(T::from_f64(-g0 * d_ratio / s.n as f64));
                        }
                    }
                    out.push((*pred, Tensor::new(s, data).expect("iou grad")));
                }
            }
            Op::Sum(x) => {
                if rg(*x) {
                    out.push((*x, Tensor::full(val(*x).shape(), g.data()[0])));
                }
            }
            Op::Mean(x) => {
                if rg(*x) {
                    let xs = val(*x).shape();
                    let v = T::from_f64(g.data()[0].as_f64() / xs.numel() as f64);
                    out.push((*x, Tensor::full(xs, v)));
                }
            }
        }
        out
    }
}

/// Numerically stable logistic function, kept strictly inside (0, 1).
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    let one = T::one();
    let y = if v >= T::zero() {
        one / (one + (-v).exp())
    } else {
        let e = v.exp();
        e / (one + e)
    };
    let hi = one - T::epsilon() / T::from_f64(2.0);
    y.max(T::min_positive_value()).min(hi)
}

/// Weighted intersection and union sums for one batch item.
fn iou_terms<T: Real>(p: &[T], t: &[T], w: Option<&[T]>, start: usize, len: usize) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for j in start..start + len {
        let wj = w.map(|w| w[j].as_f64()).unwrap_or(1.0);
        let pj = p[j].as_f64();
        let tj = t[j].as_f64();
        inter += wj * pj * tj;
        sp += wj * pj;
        st += wj * tj;
    }
    (inter, sp + st - inter)
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map shapes")
}

fn vector_like<T: Real>(like: &Tensor<T>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(like.shape(), data).expect("vector gradient shape")
}
