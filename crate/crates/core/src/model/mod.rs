//! The full forecaster: inverted embedding, stacked encoder layers, and a
//! linear projection head.

mod checkpoint;
mod cost;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::multiscale::{MultiScaleLayer, ScaleStrategy};
use crate::rng::rng_for;
use crate::ssm::BlockDims;
use crate::tensor::{BoundParams, Graph, ParamId, ParamStore, Tensor};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use cost::{cost_report, CostReport};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Lookback `L`.
    pub lookback: usize,
    /// Horizon `T`.
    pub horizon: usize,
    /// Variates `D`.
    pub variates: usize,
    /// Embedding width `D_e`.
    pub d_model: usize,
    /// Encoder depth `N`.
    pub layers: usize,
    /// Scale count `n`.
    pub scales: usize,
    pub strategy: ScaleStrategy,
    pub d_state: usize,
    pub conv_width: usize,
    pub expand: usize,
    pub bidirectional: bool,
    pub ffn_hidden: usize,
    /// Adds the layer input to the FFN output.
    pub residual: bool,
    /// Initial step sizes are drawn log-uniformly from `[dt_min, dt_max]`.
    pub dt_min: f64,
    pub dt_max: f64,
}

impl ModelConfig {
    /// Defaults for everything but the data-dependent extents.
    pub fn new(lookback: usize, horizon: usize, variates: usize) -> Self {
        ModelConfig {
            lookback,
            horizon,
            variates,
            d_model: 32,
            layers: 1,
            scales: 4,
            strategy: ScaleStrategy::Learnable,
            d_state: 16,
            conv_width: 4,
            expand: 2,
            bidirectional: true,
            ffn_hidden: 32,
            residual: true,
            dt_min: 1e-3,
            dt_max: 1e-1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("variates", self.variates),
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("scales", self.scales),
            ("d_state", self.d_state),
            ("conv_width", self.conv_width),
            ("expand", self.expand),
            ("ffn_hidden", self.ffn_hidden),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{} must be at least 1", name)));
        }
        self.block_dims()?;
        self.strategy.validate(self.scales)
    }

    pub fn block_dims(&self) -> Result<BlockDims> {
        BlockDims::new(self.d_model, self.d_state, self.expand, self.conv_width)?.with_dt_range(self.dt_min, self.dt_max)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub mixer: MultiScaleLayer,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub residual: bool,
}

impl EncoderLayer {
    /// `e + FFN(LayerNorm(mixer(e)))`, or without `e` when the residual is off.
    /// Also returns the resolved scales.
    pub fn forward_with_scales(&self, g: &mut Graph, p: &BoundParams, e: &Tensor) -> Result<(Tensor, Tensor)> {
        let (m, scales) = self.mixer.forward_with_scales(g, p, e)?;
        let h = g.layer_norm(&m, p.get(self.norm_gain), p.get(self.norm_bias), LAYER_NORM_EPS)?;
        let h = g.matmul(&h, p.get(self.ffn_w1))?;
        let h = g.add(&h, p.get(self.ffn_b1))?;
        let h = g.relu(&h)?;
        let h = g.matmul(&h, p.get(self.ffn_w2))?;
        let h = g.add(&h, p.get(self.ffn_b2))?;
        let out = if self.residual { g.add(e, &h)? } else { h };
        Ok((out, scales))
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, e: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_scales(g, p, e)?.0)
    }
}

/// Model structure; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ForecastModel {
    pub config: ModelConfig,
    pub embed_w: ParamId,
    pub embed_b: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

fn affine(store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
    let w = store.add(format!("{name}.w"), init::linear(rng, fan_in, fan_out));
    let b = store.add(format!("{name}.b"), init::uniform(rng, &[fan_out], 1.0 / (fan_in as f64).sqrt()));
    (w, b)
}

impl ForecastModel {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let dims = config.block_dims()?;
        let mut rng = rng_for(seed, "init");
        let mut store = ParamStore::new();
        let (embed_w, embed_b) = affine(&mut store, &mut rng, "embed", config.lookback, config.d_model);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let prefix = format!("layer{l}");
            let mixer = MultiScaleLayer::init(
                &mut store,
                &format!("{prefix}.mixer"),
                config.scales,
                config.variates,
                dims,
                &config.strategy,
                config.bidirectional,
                &mut rng,
            )?;
            let norm_gain = store.add(format!("{prefix}.norm.gain"), Tensor::ones(&[config.d_model]));
            let norm_bias = store.add(format!("{prefix}.norm.bias"), Tensor::zeros(&[config.d_model]));
            let (ffn_w1, ffn_b1) = affine(&mut store, &mut rng, &format!("{prefix}.ffn1"), config.d_model, config.ffn_hidden);
            let (ffn_w2, ffn_b2) = affine(&mut store, &mut rng, &format!("{prefix}.ffn2"), config.ffn_hidden, config.d_model);
            layers.push(EncoderLayer {
                mixer,
                norm_gain,
                norm_bias,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
                residual: config.residual,
            });
        }
        let (proj_w, proj_b) = affine(&mut store, &mut rng, "proj", config.d_model, config.horizon);
        let model = ForecastModel {
            config,
            embed_w,
            embed_b,
            layers,
            proj_w,
            proj_b,
        };
        Ok((model, store))
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (l, d) = (self.config.lookback, self.config.variates);
        if x.rank() < 2 || x.shape()[x.rank() - 2..] != [l, d] {
            return Err(Error::Config(format!(
                "input shape {:?} does not match lookback {} and {} variates",
                x.shape(),
                l,
                d
            )));
        }
        Ok(())
    }

    /// `[.., L, D]` history to `[.., D, D_e]` variate tokens.
    pub fn embed(&self, g: &mut Graph, p: &BoundParams, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let xt = g.transpose(x)?;
        let e = g.matmul(&xt, p.get(self.embed_w))?;
        g.add(&e, p.get(self.embed_b))
    }

    /// `[.., D, D_e]` tokens to a `[.., T, D]` forecast.
    pub fn project(&self, g: &mut Graph, p: &BoundParams, e: &Tensor) -> Result<Tensor> {
        let y = g.matmul(e, p.get(self.proj_w))?;
        let y = g.add(&y, p.get(self.proj_b))?;
        g.transpose(&y)
    }

    /// Forecast plus the scales each encoder layer resolved.
    pub fn forward_with_scales(&self, g: &mut Graph, p: &BoundParams, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut e = self.embed(g, p, x)?;
        let mut scales = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, s) = layer.forward_with_scales(g, p, &e)?;
            e = next;
            scales.push(s.detach());
        }
        Ok((self.project(g, p, &e)?, scales))
    }

    /// `[.., L, D]` to `[.., T, D]`.
    pub fn forward(&self, g: &mut Graph, p: &BoundParams, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_scales(g, p, x)?.0)
    }

    /// Untraced forecast with the given parameters.
    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let p = g.bind(store);
        self.forward(&mut g, &p, x)
    }
}

/// `mean((ŷ − y)²)` over every element.
pub fn mse_loss(g: &mut Graph, yhat: &Tensor, y: &Tensor) -> Result<Tensor> {
    if yhat.shape() != y.shape() {
        return Err(Error::shape("mse_loss", yhat.shape(), y.shape()));
    }
    let d = g.sub(yhat, y)?;
    let sq = g.mul(&d, &d)?;
    g.mean(&sq)
}
