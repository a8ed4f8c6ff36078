//! The full segmentation network: residual encoder, RFB reductions, stacked
//! GMSRF modules, decoder and deep-supervision heads.

use serde::{Deserialize, Serialize};

use crate::blocks::{ConvBlock, ConvOpts, ResidualStage, Rfb};
use crate::error::{shape_err, Error, Result};
use crate::gmsrf::{GmsrfModule, ScaleBundle, NUM_SCALES};
use crate::params::{Init, NormSettings, ParamStore, Session};
use crate::tensor::{Activation, Mode, Real, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_size: usize,
    pub encoder_widths: [usize; NUM_SCALES],
    /// `C0`, the per-scale width after RFB reduction.
    pub rfb_out: usize,
    /// Growth factor `k`.
    pub growth: usize,
    pub layers_per_module: usize,
    pub num_gmsrf_modules: usize,
    pub se_reduction: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            encoder_widths: [32, 64, 128, 256],
            rfb_out: 32,
            growth: 8,
            layers_per_module: 3,
            num_gmsrf_modules: 2,
            se_reduction: 4,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The tiny configuration used for end-to-end gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            input_size: 32,
            encoder_widths: [4, 8, 8, 8],
            rfb_out: 4,
            growth: 2,
            layers_per_module: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        if self.encoder_widths.contains(&0) || self.rfb_out == 0 || self.growth == 0 {
            return Err(Error::Config("all channel widths must be >= 1".into()));
        }
        if self.layers_per_module == 0 || self.num_gmsrf_modules == 0 || self.se_reduction == 0 {
            return Err(Error::Config("layers_per_module, num_gmsrf_modules and se_reduction must be >= 1".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be > 0 and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }

    /// Spatial side of scale `i` (1-based): `input_size / 2^(i+1)`.
    pub fn scale_size(&self, scale: usize) -> usize {
        self.input_size >> (scale + 1)
    }

    pub fn norm(&self) -> NormSettings {
        NormSettings { eps: self.bn_eps, momentum: self.bn_momentum }
    }
}

/// Layer structure of the network; parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub stem: ConvBlock,
    /// `stages[i]` produces scale `i + 1`.
    pub stages: Vec<ResidualStage>,
    pub rfbs: Vec<Rfb>,
    pub modules: Vec<GmsrfModule>,
    /// `(upsample, conv)` for D3, D2, D1 in that order.
    pub decoder: Vec<(ConvBlock, ConvBlock)>,
    /// Heads for D4, D3, D2, D1.
    pub heads: Vec<ConvBlock>,
}

impl Network {
    /// Registers every parameter of `config` into a fresh store.
    pub fn build<T: Real>(config: &ModelConfig) -> Result<(Network, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, config.seed);
        let w = config.encoder_widths;
        let c0 = config.rfb_out;
        let stem = ConvBlock::new(&mut init, "stem", 3, w[0], ConvOpts::strided(3, 2));
        let stages = init.scope("encoder", |init| {
            (0..NUM_SCALES)
                .map(|i| {
                    let cin = if i == 0 { w[0] } else { w[i - 1] };
                    ResidualStage::new(init, &format!("stage{}", i + 1), cin, w[i], true)
                })
                .collect()
        });
        let rfbs = (0..NUM_SCALES).map(|i| Rfb::new(&mut init, &format!("rfb{}", i + 1), w[i], c0)).collect();
        let modules = (1..=config.num_gmsrf_modules)
            .map(|m| GmsrfModule::new(&mut init, m, c0, config.growth, config.layers_per_module, config.se_reduction))
            .collect::<Result<_>>()?;
        let decoder = init.scope("decoder", |init| {
            (1..NUM_SCALES)
                .rev()
                .map(|i| {
                    init.scope(format!("d{i}"), |init| {
                        let up = ConvBlock::new(init, "up", c0, c0, ConvOpts::upsample());
                        let conv = ConvBlock::new(init, "conv", 2 * c0, c0, ConvOpts::same(3));
                        (up, conv)
                    })
                })
                .collect()
        });
        let head_opts = ConvOpts::same(1).norm(false).activation(Activation::Identity);
        let heads = init.scope("head", |init| {
            (1..=NUM_SCALES).rev().map(|i| ConvBlock::new(init, &format!("p{i}"), c0, 1, head_opts)).collect()
        });
        let net = Network { config: config.clone(), stem, stages, rfbs, modules, decoder, heads };
        Ok((net, store))
    }

    /// Image `(N, 3, S, S)` to the RFB-reduced bundle at strides 4/8/16/32.
    pub fn encoder_forward<T: Real>(&self, s: &mut Session<T>, image: Var) -> Result<ScaleBundle> {
        let shape = s.graph.shape(image);
        let size = self.config.input_size;
        if shape.c != 3 || shape.h != size || shape.w != size {
            return Err(shape_err!("encoder: expected Nx3x{size}x{size} image, got {shape}"));
        }
        let mut x = self.stem.forward(s, image)?;
        let mut out = [image; NUM_SCALES];
        for (i, (stage, rfb)) in self.stages.iter().zip(&self.rfbs).enumerate() {
            x = stage.forward(s, x)?;
            out[i] = rfb.forward(s, x)?;
        }
        Ok(ScaleBundle(out))
    }

    /// `[D4, D3, D2, D1]` with `D4 = X4`.
    pub fn decoder_forward<T: Real>(&self, s: &mut Session<T>, bundle: ScaleBundle) -> Result<[Var; NUM_SCALES]> {
        let mut d = [bundle.0[3]; NUM_SCALES];
        for (j, (up, conv)) in self.decoder.iter().enumerate() {
            let u = up.forward(s, d[j])?;
            let cat = s.graph.concat_channels(&[u, bundle.0[2 - j]])?;
            d[j + 1] = conv.forward(s, cat)?;
        }
        Ok(d)
    }

    /// 1×1 conv to one channel, bilinear resize to `gt_size`, sigmoid.
    pub fn supervision_heads<T: Real>(
        &self,
        s: &mut Session<T>,
        decoded: [Var; NUM_SCALES],
        gt_size: usize,
    ) -> Result<[Var; NUM_SCALES]> {
        let mut out = decoded;
        for (o, head) in out.iter_mut().zip(&self.heads) {
            let logits = head.forward(s, *o)?;
            let up = s.graph.resize_bilinear(logits, gt_size, gt_size)?;
            *o = s.graph.sigmoid(up);
        }
        Ok(out)
    }

    /// Probability maps `[P4, P3, P2, P1]`; `P1` is the primary prediction.
    pub fn forward<T: Real>(&self, s: &mut Session<T>, image: Var) -> Result<[Var; NUM_SCALES]> {
        s.norm = self.config.norm();
        let mut bundle = self.encoder_forward(s, image)?;
        for m in &self.modules {
            bundle = m.forward(s, bundle)?;
        }
        let d = self.decoder_forward(s, bundle)?;
        self.supervision_heads(s, d, self.config.input_size)
    }
}

/// A network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let (net, store) = Network::build(config)?;
        Ok(Model { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn num_params(&self) -> usize {
        self.store.num_learnable()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { net: self.net.clone(), store: self.store.cast() }
    }

    /// Eval-mode forward returning the values of `[P4, P3, P2, P1]`.
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<[Tensor<T>; NUM_SCALES]> {
        let mut s = Session::new(&mut self.store, Mode::Eval);
        let x = s.graph.input(images.clone());
        let maps = self.net.forward(&mut s, x)?;
        Ok(maps.map(|m| s.graph.value(m).clone()))
    }
}
