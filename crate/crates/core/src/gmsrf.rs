//! Global multi-scale residual fusion over four scale streams.
//!
//! Within one module, each scale `i` keeps a dense history
//! `X_{i,0}, X_{i,1}, ...`. Layer 1 is a plain 3×3 conv to `k` channels.
//! Every later layer `l` resamples the other three scales' layer `l-1`
//! outputs to scale `i` and uses them twice:
//!
//! * the cross multi-scale attention (CMSA) head turns them into a
//!   sigmoid map with `k` channels;
//! * the fusion conv sees them concatenated with the scale's whole history,
//!   `C0 + (l-1)k + 3k` channels in, `k` channels out.
//!
//! The fusion output is gated by the attention map. After the last layer the
//! history is passed through squeeze-excitation (multi-scale feature
//! selection), a 1×1 transition back to `C0`, and added to the module input.

use crate::blocks::{scale_len, ConvBlock, ConvOpts, Resampler, SqueezeExcite};
use crate::error::{shape_err, Error, Result};
use crate::params::{Init, Session};
use crate::tensor::{Activation, Real, Var};

pub const NUM_SCALES: usize = 4;

/// Feature maps for scales 1..=4 (strides 4/8/16/32), as graph values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleBundle(pub [Var; NUM_SCALES]);

impl ScaleBundle {
    /// Spatial side of scale 1; every later scale halves it.
    pub fn scale1_len<T: Real>(&self, s: &Session<T>) -> usize {
        s.graph.shape(self.0[0]).h
    }

    /// Checks the halving law, a common batch size, and `channels` per scale.
    pub fn validate<T: Real>(&self, s: &Session<T>, channels: usize) -> Result<()> {
        let first = s.graph.shape(self.0[0]);
        for (i, &v) in self.0.iter().enumerate() {
            let sh = s.graph.shape(v);
            let side = scale_len(first.h, i + 1);
            if sh.n != first.n || sh.h != side || sh.w != side || sh.c != channels || side == 0 {
                return Err(shape_err!(
                    "scale bundle: scale {} is {sh}, expected {}x{channels}x{side}x{side}",
                    i + 1,
                    first.n
                ));
            }
        }
        Ok(())
    }
}

/// The other three scales, in ascending order.
pub fn other_scales(scale: usize) -> [usize; 3] {
    let mut out = [0; 3];
    let mut j = 0;
    for s in 1..=NUM_SCALES {
        if s != scale {
            out[j] = s;
            j += 1;
        }
    }
    out
}

/// Input width of the fusion conv at layer `layer >= 2`.
pub fn fusion_input_width(c0: usize, k: usize, layer: usize) -> usize {
    c0 + (layer - 1) * k + 3 * k
}

/// Cross multi-scale attention for one target scale.
#[derive(Clone, Debug)]
pub struct Cmsa {
    pub target_scale: usize,
    pub resamplers: Vec<Resampler>,
    pub conv3: ConvBlock,
    pub conv1: ConvBlock,
}

impl Cmsa {
    pub fn new<T: Real>(init: &mut Init<T>, target_scale: usize, k: usize) -> Self {
        init.scope("cmsa", |init| {
            let resamplers = other_scales(target_scale)
                .iter()
                .map(|&from| Resampler::new(init, &format!("from{from}"), from, target_scale, k))
                .collect();
            let conv3 = ConvBlock::new(init, "conv3", 3 * k, k, ConvOpts::same(3));
            let conv1 =
                ConvBlock::new(init, "conv1", k, k, ConvOpts::same(1).norm(false).activation(Activation::Sigmoid));
            Cmsa { target_scale, resamplers, conv3, conv1 }
        })
    }

    /// Brings the other scales' maps to the target scale's size.
    pub fn resample<T: Real>(&self, s: &mut Session<T>, others: [Var; 3], scale1_len: usize) -> Result<[Var; 3]> {
        let mut out = others;
        for (o, r) in out.iter_mut().zip(&self.resamplers) {
            *o = r.forward(s, *o, scale1_len)?;
        }
        Ok(out)
    }

    /// Attention map from already-resampled inputs: 3×3 conv, then 1×1 conv
    /// with sigmoid.
    pub fn attend<T: Real>(&self, s: &mut Session<T>, resampled: [Var; 3]) -> Result<Var> {
        let cat = s.graph.concat_channels(&resampled)?;
        let h = self.conv3.forward(s, cat)?;
        let att = self.conv1.forward(s, h)?;
        s.stats.cmsa_maps += 1;
        Ok(att)
    }

    /// Full CMSA: resample the other scales, then attend.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, others: [Var; 3], scale1_len: usize) -> Result<Var> {
        let r = self.resample(s, others, scale1_len)?;
        self.attend(s, r)
    }
}

/// Parameters of layer `l >= 2` for one scale.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub layer: usize,
    pub cmsa: Cmsa,
    pub conv: ConvBlock,
}

impl FusionLayer {
    /// Densely connected fusion conv over `own_history ⊕ resampled_others`.
    pub fn fuse<T: Real>(&self, s: &mut Session<T>, own_history: &[Var], resampled_others: [Var; 3]) -> Result<Var> {
        if self.layer < 2 {
            return Err(Error::Usage(format!(
                "fusion layer {} requested; layer 1 has no cross-scale input",
                self.layer
            )));
        }
        if own_history.len() != self.layer {
            return Err(shape_err!(
                "fusion layer {}: expected {} history entries, got {}",
                self.layer,
                self.layer,
                own_history.len()
            ));
        }
        let mut parts = own_history.to_vec();
        parts.extend_from_slice(&resampled_others);
        let cat = s.graph.concat_channels(&parts)?;
        let width = s.graph.shape(cat).c;
        if width != self.conv.in_channels {
            return Err(shape_err!(
                "fusion layer {}: concatenated width {width}, conv expects {}",
                self.layer,
                self.conv.in_channels
            ));
        }
        let out = self.conv.forward(s, cat)?;
        s.stats.fusion_convs += 1;
        Ok(out)
    }
}

/// Squeeze-excitation over the fused history, 1×1 transition to `C0`, and
/// the module-level residual.
#[derive(Clone, Debug)]
pub struct Msfs {
    pub se: SqueezeExcite,
    pub transition: ConvBlock,
}

impl Msfs {
    pub fn forward<T: Real>(&self, s: &mut Session<T>, fused: Var, module_input: Var) -> Result<Var> {
        let fs = s.graph.shape(fused);
        let ms = s.graph.shape(module_input);
        if (fs.n, fs.h, fs.w) != (ms.n, ms.h, ms.w) || ms.c != self.transition.out_channels {
            return Err(shape_err!("msfs: fused {fs} incompatible with module input {ms}"));
        }
        let selected = self.se.forward(s, fused)?;
        let t = self.transition.forward(s, selected)?;
        s.graph.add(t, module_input)
    }
}

/// Elementwise gating of fused features by an attention map.
pub fn apply_attention<T: Real>(s: &mut Session<T>, x: Var, att: Var) -> Result<Var> {
    s.graph.mul(x, att)
}

#[derive(Clone, Debug)]
pub struct GmsrfModule {
    pub index: usize,
    pub c0: usize,
    pub k: usize,
    pub layers: usize,
    /// Layer-1 conv per scale.
    pub initial: Vec<ConvBlock>,
    /// `fusion[l - 2][i]` is layer `l` for scale `i + 1`.
    pub fusion: Vec<Vec<FusionLayer>>,
    pub msfs: Vec<Msfs>,
}

impl GmsrfModule {
    pub fn new<T: Real>(
        init: &mut Init<T>,
        index: usize,
        c0: usize,
        k: usize,
        layers: usize,
        se_reduction: usize,
    ) -> Result<Self> {
        if layers == 0 || k == 0 || c0 == 0 {
            return Err(Error::Config(format!(
                "gmsrf module needs L >= 1, k >= 1, C0 >= 1 (got L={layers}, k={k}, C0={c0})"
            )));
        }
        Ok(init.scope(format!("gmsrf{index}"), |init| {
            let initial = (1..=NUM_SCALES)
                .map(|i| {
                    init.scope(format!("scale{i}"), |init| ConvBlock::new(init, "layer1", c0, k, ConvOpts::same(3)))
                })
                .collect();
            let fusion = (2..=layers)
                .map(|l| {
                    (1..=NUM_SCALES)
                        .map(|i| {
                            init.scope(format!("scale{i}.layer{l}"), |init| FusionLayer {
                                layer: l,
                                cmsa: Cmsa::new(init, i, k),
                                conv: ConvBlock::new(init, "fuse", fusion_input_width(c0, k, l), k, ConvOpts::same(3)),
                            })
                        })
                        .collect()
                })
                .collect();
            let msfs = (1..=NUM_SCALES)
                .map(|i| {
                    init.scope(format!("scale{i}.msfs"), |init| {
                        let fused = c0 + layers * k;
                        Msfs {
                            se: SqueezeExcite::new(init, "se", fused, se_reduction),
                            transition: ConvBlock::new(init, "transition", fused, c0, ConvOpts::same(1)),
                        }
                    })
                })
                .collect();
            GmsrfModule { index, c0, k, layers, initial, fusion, msfs }
        }))
    }

    /// Layer 1 for scale `scale`: 3×3 conv block from `C0` to `k` channels.
    pub fn initial_layer<T: Real>(&self, s: &mut Session<T>, scale: usize, x: Var) -> Result<Var> {
        self.initial[scale - 1].forward(s, x)
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, input: ScaleBundle) -> Result<ScaleBundle> {
        input.validate(s, self.c0)?;
        let base = input.scale1_len(s);
        let mut history: Vec<Vec<Var>> = input.0.iter().map(|&x| vec![x]).collect();
        let mut prev = [input.0[0]; NUM_SCALES];
        for i in 0..NUM_SCALES {
            prev[i] = self.initial_layer(s, i + 1, input.0[i])?;
            history[i].push(prev[i]);
        }
        for (li, layer) in self.fusion.iter().enumerate() {
            let l = li + 2;
            let mut next = prev;
            for (i, unit) in layer.iter().enumerate() {
                let others = other_scales(i + 1).map(|j| prev[j - 1]);
                let resampled = unit.cmsa.resample(s, others, base)?;
                let att = unit.cmsa.attend(s, resampled)?;
                let fused = unit.fuse(s, &history[i], resampled)?;
                let width = unit.conv.in_channels;
                s.stats.fusion_input_widths.push((self.index, l, i + 1, width));
                next[i] = apply_attention(s, fused, att)?;
            }
            for i in 0..NUM_SCALES {
                history[i].push(next[i]);
            }
            prev = next;
        }
        let mut out = input.0;
        for i in 0..NUM_SCALES {
            let fused = s.graph.concat_channels(&history[i])?;
            out[i] = self.msfs[i].forward(s, fused, input.0[i])?;
        }
        Ok(ScaleBundle(out))
    }
}
