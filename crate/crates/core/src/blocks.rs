//! Composite layers: convolution blocks, squeeze-excitation, scale
//! resamplers, the receptive-field reduction block, and residual stages.

use crate::error::{shape_err, Result};
use crate::params::{BnStateId, Init, ParamId, Session};
use crate::tensor::{Activation, ConvSpec, Real, Shape, Var};

#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: BnStateId,
}

/// Convolution (or transposed convolution), optional batch norm, activation.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn: Option<BatchNormParams>,
    pub activation: Activation,
    pub spec: ConvSpec,
    pub transposed: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

/// Construction options for [`ConvBlock`].
#[derive(Clone, Copy, Debug)]
pub struct ConvOpts {
    pub kernel: usize,
    pub spec: ConvSpec,
    pub activation: Activation,
    pub norm: bool,
    pub transposed: bool,
}

impl ConvOpts {
    /// Size-preserving k×k conv + BN + leaky ReLU.
    pub fn same(kernel: usize) -> Self {
        ConvOpts { kernel, spec: ConvSpec::same(kernel), activation: Activation::LEAKY, norm: true, transposed: false }
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        ConvOpts { spec: ConvSpec::new(stride, kernel / 2), ..Self::same(kernel) }
    }

    /// Stride-2 transposed conv (kernel 4, padding 1) that doubles spatial size.
    pub fn upsample() -> Self {
        ConvOpts { kernel: 4, spec: ConvSpec::new(2, 1), transposed: true, ..Self::same(3) }
    }

    pub fn activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn norm(mut self, norm: bool) -> Self {
        self.norm = norm;
        self
    }

    pub fn spec(mut self, spec: ConvSpec) -> Self {
        self.spec = spec;
        self
    }
}

impl ConvBlock {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, opts: ConvOpts) -> Self {
        init.scope(name, |init| {
            let k = opts.kernel;
            let (shape, fan_in) = if opts.transposed {
                (Shape::new(cin, cout, k, k), cout * k * k)
            } else {
                (Shape::new(cout, cin, k, k), cin * k * k)
            };
            let weight = init.kaiming("weight", shape, fan_in);
            let bias = init.constant("bias", Shape::vector(cout), 0.0);
            let bn = opts.norm.then(|| {
                init.scope("bn", |init| BatchNormParams {
                    gamma: init.constant("gamma", Shape::vector(cout), 1.0),
                    beta: init.constant("beta", Shape::vector(cout), 0.0),
                    state: init.bn_state(cout),
                })
            });
            ConvBlock {
                weight,
                bias,
                bn,
                activation: opts.activation,
                spec: opts.spec,
                transposed: opts.transposed,
                in_channels: cin,
                out_channels: cout,
                kernel: k,
            }
        })
    }

    /// conv → batch norm → activation.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = if self.transposed {
            s.graph.conv_transpose2d(x, w, Some(b), self.spec)?
        } else {
            s.graph.conv2d(x, w, Some(b), self.spec)?
        };
        let y = match self.bn {
            Some(bn) => s.batch_norm(y, bn.gamma, bn.beta, bn.state)?,
            None => y,
        };
        Ok(s.graph.activation(y, self.activation))
    }

    pub fn num_params(&self) -> usize {
        let w = self.in_channels * self.out_channels * self.kernel * self.kernel;
        w + self.out_channels + if self.bn.is_some() { 2 * self.out_channels } else { 0 }
    }
}

/// Channel attention: `x ⊗ sigmoid(W2 relu(W1 gap(x) + b1) + b2)`.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
    pub channels: usize,
    pub hidden: usize,
}

/// Hidden width of the excitation bottleneck.
pub fn se_hidden(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

impl SqueezeExcite {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, channels: usize, reduction: usize) -> Self {
        let hidden = se_hidden(channels, reduction);
        init.scope(name, |init| SqueezeExcite {
            fc1_weight: init.kaiming("fc1.weight", Shape::new(hidden, channels, 1, 1), channels),
            fc1_bias: init.constant("fc1.bias", Shape::vector(hidden), 0.0),
            fc2_weight: init.kaiming("fc2.weight", Shape::new(channels, hidden, 1, 1), hidden),
            fc2_bias: init.constant("fc2.bias", Shape::vector(channels), 0.0),
            channels,
            hidden,
        })
    }

    pub fn gate<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let c = s.graph.shape(x).c;
        if c != self.channels {
            return Err(shape_err!("squeeze_excite: expected {} channels, got {c}", self.channels));
        }
        let pooled = s.graph.global_avg_pool(x);
        let (w1, b1) = (s.param(self.fc1_weight), s.param(self.fc1_bias));
        let h = s.graph.linear(pooled, w1, Some(b1))?;
        let h = s.graph.relu(h);
        let (w2, b2) = (s.param(self.fc2_weight), s.param(self.fc2_bias));
        let z = s.graph.linear(h, w2, Some(b2))?;
        Ok(s.graph.sigmoid(z))
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let gate = self.gate(s, x)?;
        s.graph.scale_channels(x, gate)
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels * self.hidden + self.hidden + self.channels
    }
}

/// Spatial side length of `scale` (1-based) given the side length of scale 1.
pub fn scale_len(scale1_len: usize, scale: usize) -> usize {
    scale1_len >> (scale - 1)
}

/// Moves a feature map between scales through a chain of stride-2 stages.
#[derive(Clone, Debug)]
pub struct Resampler {
    pub from_scale: usize,
    pub to_scale: usize,
    pub stages: Vec<ConvBlock>,
}

impl Resampler {
    /// Down stages: 3×3 stride-2 conv; up stages: 4×4 stride-2 transposed conv.
    /// Channels are preserved.
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, from_scale: usize, to_scale: usize, channels: usize) -> Self {
        assert!((1..=4).contains(&from_scale) && (1..=4).contains(&to_scale));
        let steps = from_scale.abs_diff(to_scale);
        let opts = if to_scale > from_scale { ConvOpts::strided(3, 2) } else { ConvOpts::upsample() };
        let stages = init.scope(name, |init| {
            (0..steps).map(|i| ConvBlock::new(init, &format!("stage{i}"), channels, channels, opts)).collect()
        });
        Resampler { from_scale, to_scale, stages }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var, scale1_len: usize) -> Result<Var> {
        let xs = s.graph.shape(x);
        let expected = scale_len(scale1_len, self.from_scale);
        if xs.h != expected || xs.w != expected {
            return Err(shape_err!("resample: input {xs} is not at scale {} ({expected}x{expected})", self.from_scale));
        }
        let mut y = x;
        for stage in &self.stages {
            y = stage.forward(s, y)?;
        }
        Ok(y)
    }
}

/// Branch widths of the receptive-field block for `out` output channels:
/// `out / 4` per dilated branch (at least 1), remainder to the 1×1 branch.
pub fn rfb_branch_widths(out: usize) -> [usize; 4] {
    let base = (out / 4).max(1);
    let first = out.saturating_sub(3 * base).max(1);
    [first, base, base, base]
}

/// Dilations of the three 3×3 branches.
pub const RFB_DILATIONS: [usize; 3] = [1, 3, 5];

/// Multi-receptive-field channel reduction.
#[derive(Clone, Debug)]
pub struct Rfb {
    pub branches: Vec<ConvBlock>,
    pub fuse: ConvBlock,
    pub shortcut: ConvBlock,
    pub out_channels: usize,
}

impl Rfb {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, cin: usize, out: usize) -> Self {
        init.scope(name, |init| {
            let widths = rfb_branch_widths(out);
            let mut branches = vec![ConvBlock::new(init, "branch0", cin, widths[0], ConvOpts::same(1))];
            for (i, &d) in RFB_DILATIONS.iter().enumerate() {
                let opts = ConvOpts::same(3).spec(ConvSpec::dilated(d, d));
                branches.push(ConvBlock::new(init, &format!("branch{}", i + 1), cin, widths[i + 1], opts));
            }
            let concat: usize = widths.iter().sum();
            let fuse = ConvBlock::new(init, "fuse", concat, out, ConvOpts::same(1));
            let shortcut =
                ConvBlock::new(init, "shortcut", cin, out, ConvOpts::same(1).activation(Activation::Identity));
            Rfb { branches, fuse, shortcut, out_channels: out }
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let parts = self.branches.iter().map(|b| b.forward(s, x)).collect::<Result<Vec<_>>>()?;
        let cat = s.graph.concat_channels(&parts)?;
        let fused = self.fuse.forward(s, cat)?;
        let skip = self.shortcut.forward(s, x)?;
        s.graph.add(fused, skip)
    }
}

/// Two conv blocks plus an identity or 1×1-projected shortcut.
#[derive(Clone, Debug)]
pub struct ResidualStage {
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    pub shortcut: Option<ConvBlock>,
}

impl ResidualStage {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, downsample: bool) -> Self {
        let stride = if downsample { 2 } else { 1 };
        init.scope(name, |init| {
            let conv1 = ConvBlock::new(init, "conv1", cin, cout, ConvOpts::strided(3, stride));
            let conv2 = ConvBlock::new(init, "conv2", cout, cout, ConvOpts::same(3));
            let shortcut = (downsample || cin != cout).then(|| {
                let opts = ConvOpts::strided(1, stride).activation(Activation::Identity);
                ConvBlock::new(init, "shortcut", cin, cout, opts)
            });
            ResidualStage { conv1, conv2, shortcut }
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.conv1.forward(s, x)?;
        let y = self.conv2.forward(s, y)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(s, x)?,
            None => x,
        };
        s.graph.add(y, skip)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rfb_split_rule() {
        assert_eq!(rfb_branch_widths(32), [8, 8, 8, 8]);
        assert_eq!(rfb_branch_widths(34), [10, 8, 8, 8]);
        assert_eq!(rfb_branch_widths(4), [1, 1, 1, 1]);
        assert_eq!(rfb_branch_widths(2), [1, 1, 1, 1]);
    }

    #[test]
    fn se_hidden_width() {
        assert_eq!(se_hidden(56, 4), 14);
        assert_eq!(se_hidden(3, 4), 1);
    }
}
