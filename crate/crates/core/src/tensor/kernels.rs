//! Numerical kernels behind the graph ops.
//!
//! Convolutions are lowered to im2col + GEMM. The nested-loop
//! [`conv2d_reference`] and [`conv_transpose2d_reference`] define the
//! semantics; the fast paths are tested against them.
//!
//! Batch items are processed independently (optionally on the rayon pool) and
//! any cross-batch reduction is summed in batch order, so results are bitwise
//! identical for every thread count.

use std::cell::Cell;

use rayon::prelude::*;

use super::{Real, Shape, Tensor};
use crate::error::{shape_err, Result};

/// Geometry of a forward convolution from `(cin, h, w)` to `(cout, ho, wo)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub ho: usize,
    pub wo: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output length of a strided, padded, dilated convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize, dilation: usize) -> Result<usize> {
    if stride == 0 || dilation == 0 || kernel == 0 {
        return Err(shape_err!("stride, dilation, and kernel must be positive (got {stride}, {dilation}, {kernel})"));
    }
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * padding;
    if padded < span {
        return Err(shape_err!(
            "non-positive output size: input {input} + 2*{padding} padding is smaller than kernel span {span}"
        ));
    }
    Ok((padded - span) / stride + 1)
}

/// Output length of a transposed convolution along one axis.
pub fn conv_transpose_out_len(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<usize> {
    if stride == 0 || dilation == 0 || kernel == 0 || input == 0 {
        return Err(shape_err!(
            "stride, dilation, kernel, and input must be positive (got {stride}, {dilation}, {kernel}, {input})"
        ));
    }
    let full = (input - 1) * stride + dilation * (kernel - 1) + 1;
    if full <= 2 * padding {
        return Err(shape_err!("non-positive transposed output size: ({input}-1)*{stride} - 2*{padding} + span"));
    }
    Ok(full - 2 * padding)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih as usize >= g.h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, out) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        *out = if iw < 0 || iw as usize >= g.w { T::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    x.fill(T::zero());
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let xc = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    if ih < 0 || ih as usize >= g.h {
                        continue;
                    }
                    let dst = &mut xc[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for ow in 0..g.wo {
                        let iw = (ow * g.stride + kj * g.dilation) as isize - g.padding as isize;
                        if iw >= 0 && (iw as usize) < g.w {
                            dst[iw as usize] = dst[iw as usize] + src[oh * g.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

fn parallel_enabled(batch: usize) -> bool {
    batch > 1 && rayon::current_num_threads() > 1
}

/// Runs `f(item_index, item_slice)` over equal chunks of `out`.
fn for_each_item<T: Real>(out: &mut [T], item: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    if item == 0 {
        return;
    }
    let batch = out.len() / item;
    if parallel_enabled(batch) {
        out.par_chunks_mut(item).enumerate().for_each(|(n, chunk)| f(n, chunk));
    } else {
        out.chunks_mut(item).enumerate().for_each(|(n, chunk)| f(n, chunk));
    }
}

/// `y = conv(x, w) + bias`. `w` is (cout, cin, kh, kw).
pub fn conv_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&[T]>, g: &ConvGeom) -> Tensor<T> {
    let n = x.shape().n;
    let mut y = Tensor::zeros(Shape::new(n, g.cout, g.ho, g.wo));
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * g.out_plane();
    let rows = g.cols_rows();
    let plane = g.out_plane();
    let xd = x.data();
    let wd = w.data();
    for_each_item(y.data_mut(), out_item, |b, out| {
        let xs = &xd[b * in_item..(b + 1) * in_item];
        let scratch;
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            let mut buf = vec![T::zero(); rows * plane];
            im2col(xs, g, &mut buf);
            scratch = buf;
            &scratch
        };
        T::gemm(
            g.cout,
            rows,
            plane,
            T::one(),
            wd,
            (rows as isize, 1),
            cols,
            (plane as isize, 1),
            T::zero(),
            out,
            (plane as isize, 1),
        );
        if let Some(bias) = bias {
            for (co, chan) in out.chunks_mut(plane).enumerate() {
                let b = bias[co];
                chan.iter_mut().for_each(|v| *v = *v + b);
            }
        }
    });
    y
}

thread_local! {
    static CORRUPT_INPUT_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: when enabled on the current thread, convolution input
/// gradients are scaled by 1.01. Used as a negative control for gradient
/// checking.
#[doc(hidden)]
pub fn set_conv_grad_corruption(enabled: bool) {
    CORRUPT_INPUT_GRAD.with(|c| c.set(enabled));
}

pub(crate) fn conv_grad_corrupted() -> bool {
    CORRUPT_INPUT_GRAD.with(|c| c.get())
}

/// Gradient of a convolution with respect to its input (the adjoint map).
pub fn conv_backward_input<T: Real>(dy: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let n = dy.shape().n;
    let mut dx = Tensor::zeros(Shape::new(n, g.cin, g.h, g.w));
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * g.out_plane();
    let rows = g.cols_rows();
    let plane = g.out_plane();
    let dyd = dy.data();
    let wd = w.data();
    for_each_item(dx.data_mut(), in_item, |b, dxs| {
        let dys = &dyd[b * out_item..(b + 1) * out_item];
        if g.is_pointwise() {
            T::gemm(
                rows,
                g.cout,
                plane,
                T::one(),
                wd,
                (1, rows as isize),
                dys,
                (plane as isize, 1),
                T::zero(),
                dxs,
                (plane as isize, 1),
            );
        } else {
            let mut dcols = vec![T::zero(); rows * plane];
            T::gemm(
                rows,
                g.cout,
                plane,
                T::one(),
                wd,
                (1, rows as isize),
                dys,
                (plane as isize, 1),
                T::zero(),
                &mut dcols,
                (plane as isize, 1),
            );
            col2im(&dcols, g, dxs);
        }
    });
    dx
}

/// Gradient of a convolution with respect to its weight, summed over the batch.
pub fn conv_backward_weight<T: Real>(dy: &Tensor<T>, x: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let n = x.shape().n;
    let rows = g.cols_rows();
    let plane = g.out_plane();
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * plane;
    let wlen = g.cout * rows;
    let xd = x.data();
    let dyd = dy.data();
    let partial = |b: usize| -> Vec<T> {
        let xs = &xd[b * in_item..(b + 1) * in_item];
        let dys = &dyd[b * out_item..(b + 1) * out_item];
        let scratch;
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            let mut buf = vec![T::zero(); rows * plane];
            im2col(xs, g, &mut buf);
            scratch = buf;
            &scratch
        };
        let mut dw = vec![T::zero(); wlen];
        T::gemm(
            g.cout,
            plane,
            rows,
            T::one(),
            dys,
            (plane as isize, 1),
            cols,
            (1, plane as isize),
            T::zero(),
            &mut dw,
            (rows as isize, 1),
        );
        dw
    };
    let mut acc = vec![T::zero(); wlen];
    if parallel_enabled(n) {
        let parts: Vec<Vec<T>> = (0..n).into_par_iter().map(partial).collect();
        for p in parts {
            acc.iter_mut().zip(p).for_each(|(a, v)| *a = *a + v);
        }
    } else {
        for b in 0..n {
            let p = partial(b);
            acc.iter_mut().zip(p).for_each(|(a, v)| *a = *a + v);
        }
    }
    Tensor::new(Shape::new(g.cout, g.cin, g.kh, g.kw), acc).expect("weight gradient shape")
}

/// Per-channel sum over batch and space, the bias gradient of a convolution.
pub fn channel_sums<T: Real>(dy: &Tensor<T>) -> Vec<T> {
    let s = dy.shape();
    let mut out = vec![T::zero(); s.c];
    for chunk in dy.data().chunks(s.plane().max(1)).enumerate() {
        let (i, vals) = chunk;
        let c = i % s.c;
        out[c] = out[c] + vals.iter().copied().sum::<T>();
    }
    out
}

/// Direct nested-loop convolution. Defines the reference semantics.
pub fn conv2d_reference<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.c != ws.c {
        return Err(shape_err!("input channels {} != weight in-channels {}", xs.c, ws.c));
    }
    let ho = conv_out_len(xs.h, ws.h, stride, padding, dilation)?;
    let wo = conv_out_len(xs.w, ws.w, stride, padding, dilation)?;
    let mut y = Tensor::zeros(Shape::new(xs.n, ws.n, ho, wo));
    for n in 0..xs.n {
        for co in 0..ws.n {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias.map(|b| b[co].as_f64()).unwrap_or(0.0);
                    for ci in 0..xs.c {
                        for ki in 0..ws.h {
                            for kj in 0..ws.w {
                                let ih = (oh * stride + ki * dilation) as isize - padding as isize;
                                let iw = (ow * stride + kj * dilation) as isize - padding as isize;
                                if ih < 0 || iw < 0 || ih as usize >= xs.h || iw as usize >= xs.w {
                                    continue;
                                }
                                acc += x.at(n, ci, ih as usize, iw as usize).as_f64() * w.at(co, ci, ki, kj).as_f64();
                            }
                        }
                    }
                    y.set(n, co, oh, ow, T::from_f64(acc));
                }
            }
        }
    }
    Ok(y)
}

/// Scatter-accumulate transposed convolution. `w` is (cin, cout, kh, kw).
pub fn conv_transpose2d_reference<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.c != ws.n {
        return Err(shape_err!("input channels {} != weight in-channels {}", xs.c, ws.n));
    }
    let ho = conv_transpose_out_len(xs.h, ws.h, stride, padding, dilation)?;
    let wo = conv_transpose_out_len(xs.w, ws.w, stride, padding, dilation)?;
    let mut acc = vec![0.0f64; xs.n * ws.c * ho * wo];
    for n in 0..xs.n {
        for ci in 0..xs.c {
            for ih in 0..xs.h {
                for iw in 0..xs.w {
                    let v = x.at(n, ci, ih, iw).as_f64();
                    for co in 0..ws.c {
                        for ki in 0..ws.h {
                            for kj in 0..ws.w {
                                let oh = (ih * stride + ki * dilation) as isize - padding as isize;
                                let ow = (iw * stride + kj * dilation) as isize - padding as isize;
                                if oh < 0 || ow < 0 || oh as usize >= ho || ow as usize >= wo {
                                    continue;
                                }
                                let idx = ((n * ws.c + co) * ho + oh as usize) * wo + ow as usize;
                                acc[idx] += v * w.at(ci, co, ki, kj).as_f64();
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        for (i, v) in acc.iter_mut().enumerate() {
            *v += b[(i / (ho * wo)) % ws.c].as_f64();
        }
    }
    Tensor::from_f64(Shape::new(xs.n, ws.c, ho, wo), &acc)
}

/// Per-axis interpolation table: source indices and weights for each output.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

/// Half-pixel-center linear taps (`align_corners = false`).
pub(crate) fn bilinear_taps(input: usize, output: usize) -> AxisTaps {
    let scale = input as f64 / output as f64;
    let mut taps =
        AxisTaps { lo: Vec::with_capacity(output), hi: Vec::with_capacity(output), frac: Vec::with_capacity(output) };
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(input - 1);
        let hi = (lo + 1).min(input - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(src - lo as f64);
    }
    taps
}

pub fn resize_bilinear_forward<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = x.shape();
    if (s.h, s.w) == (out_h, out_w) {
        return x.clone();
    }
    let th = bilinear_taps(s.h, out_h);
    let tw = bilinear_taps(s.w, out_w);
    let mut y = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    let src = x.data();
    let dst = y.data_mut();
    for (plane_idx, out) in dst.chunks_mut(out_h * out_w).enumerate() {
        let inp = &src[plane_idx * s.h * s.w..(plane_idx + 1) * s.h * s.w];
        for oh in 0..out_h {
            let (h0, h1, fh) = (th.lo[oh], th.hi[oh], T::from_f64(th.frac[oh]));
            for ow in 0..out_w {
                let (w0, w1, fw) = (tw.lo[ow], tw.hi[ow], T::from_f64(tw.frac[ow]));
                let top = inp[h0 * s.w + w0] * (T::one() - fw) + inp[h0 * s.w + w1] * fw;
                let bot = inp[h1 * s.w + w0] * (T::one() - fw) + inp[h1 * s.w + w1] * fw;
                out[oh * out_w + ow] = top * (T::one() - fh) + bot * fh;
            }
        }
    }
    y
}

pub fn resize_bilinear_backward<T: Real>(dy: &Tensor<T>, in_shape: Shape) -> Tensor<T> {
    let s = in_shape;
    let ds = dy.shape();
    if (s.h, s.w) == (ds.h, ds.w) {
        return dy.clone();
    }
    let th = bilinear_taps(s.h, ds.h);
    let tw = bilinear_taps(s.w, ds.w);
    let mut dx = Tensor::zeros(s);
    let src = dy.data();
    let dst = dx.data_mut();
    for (plane_idx, out) in dst.chunks_mut(s.h * s.w).enumerate() {
        let g = &src[plane_idx * ds.h * ds.w..(plane_idx + 1) * ds.h * ds.w];
        for oh in 0..ds.h {
            let (h0, h1, fh) = (th.lo[oh], th.hi[oh], T::from_f64(th.frac[oh]));
            for ow in 0..ds.w {
                let (w0, w1, fw) = (tw.lo[ow], tw.hi[ow], T::from_f64(tw.frac[ow]));
                let v = g[oh * ds.w + ow];
                let top = v * (T::one() - fh);
                let bot = v * fh;
                out[h0 * s.w + w0] = out[h0 * s.w + w0] + top * (T::one() - fw);
                out[h0 * s.w + w1] = out[h0 * s.w + w1] + top * fw;
                out[h1 * s.w + w0] = out[h1 * s.w + w0] + bot * (T::one() - fw);
                out[h1 * s.w + w1] = out[h1 * s.w + w1] + bot * fw;
            }
        }
    }
    dx
}

/// Nearest-neighbour resize (pixel-center sampling). Not differentiable;
/// used for masks.
pub fn resize_nearest<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = x.shape();
    let pick = |o: usize, input: usize, output: usize| -> usize {
        (((o as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
    };
    Tensor::from_fn(Shape::new(s.n, s.c, out_h, out_w), |[n, c, h, w]| {
        x.at(n, c, pick(h, s.h, out_h), pick(w, s.w, out_w))
    })
}
