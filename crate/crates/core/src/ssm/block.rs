use rand_chacha::ChaCha8Rng;

use super::{causal_conv, selective_params, selective_scan, SsmCore};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{BoundParams, Graph, ParamId, ParamStore, Tensor};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub conv_width: usize,
    /// Range of the initial step sizes, sampled log-uniformly.
    pub dt_min: f64,
    pub dt_max: f64,
}

impl BlockDims {
    pub fn new(d_model: usize, d_state: usize, expand: usize, conv_width: usize) -> Result<Self> {
        if d_model == 0 || d_state == 0 || expand == 0 || conv_width == 0 {
            return Err(Error::Config(format!(
                "block dimensions must be positive: d_model={d_model}, d_state={d_state}, expand={expand}, conv_width={conv_width}"
            )));
        }
        Ok(BlockDims {
            d_model,
            d_inner: expand * d_model,
            d_state,
            conv_width,
            dt_min: 1e-3,
            dt_max: 1e-1,
        })
    }

    pub fn with_dt_range(mut self, dt_min: f64, dt_max: f64) -> Result<Self> {
        if !(dt_min > 0.0) || !(dt_max >= dt_min) || !dt_max.is_finite() {
            return Err(Error::Config(format!("invalid initial step range [{dt_min}, {dt_max}]")));
        }
        self.dt_min = dt_min;
        self.dt_max = dt_max;
        Ok(self)
    }

    /// Scalar parameter count of one block.
    pub fn param_count(&self) -> usize {
        let BlockDims { d_model: m, d_inner: di, d_state: n, conv_width: k, .. } = *self;
        m * 2 * di          // in_proj
            + di * k + di   // conv
            + di * n        // a_log
            + di * di + di  // delta_proj, delta_bias
            + 2 * di * n    // b_proj, c_proj
            + di            // d_skip
            + di * m        // out_proj
            + m             // norm gain
    }

    /// Multiply-accumulates for one sequence of `tokens` tokens.
    pub fn macs(&self, tokens: usize) -> u64 {
        let BlockDims { d_model: m, d_inner: di, d_state: n, conv_width: k, .. } = *self;
        let per_token = m * 2 * di + di * k + di * di + 2 * di * n + di * (3 * n + 1) + di * m;
        (tokens * per_token) as u64
    }
}

/// One Mamba block: gated selective SSM between two projections, with an
/// RMS normalization on the way out.
#[derive(Clone, Debug)]
pub struct MambaBlock {
    pub dims: BlockDims,
    pub in_proj: ParamId,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub ssm: SsmCore,
    pub out_proj: ParamId,
    pub norm_gain: ParamId,
}

impl MambaBlock {
    pub fn init(store: &mut ParamStore, prefix: &str, dims: BlockDims, rng: &mut ChaCha8Rng) -> Self {
        let BlockDims { d_model, d_inner, d_state, conv_width, .. } = dims;
        let in_proj = store.add(format!("{prefix}.in_proj"), init::linear(rng, d_model, 2 * d_inner));
        let conv_bound = 1.0 / (conv_width as f64).sqrt();
        let conv_weight = store.add(
            format!("{prefix}.conv_weight"),
            init::uniform(rng, &[d_inner, conv_width], conv_bound),
        );
        let conv_bias = store.add(format!("{prefix}.conv_bias"), init::uniform(rng, &[d_inner], conv_bound));
        let ssm = SsmCore::init(store, &format!("{prefix}.ssm"), d_inner, d_state, (dims.dt_min, dims.dt_max), rng);
        let out_proj = store.add(format!("{prefix}.out_proj"), init::linear(rng, d_inner, d_model));
        let norm_gain = store.add(format!("{prefix}.norm_gain"), Tensor::ones(&[d_model]));
        MambaBlock { dims, in_proj, conv_weight, conv_bias, ssm, out_proj, norm_gain }
    }

    /// Every parameter the block owns.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let s = &self.ssm;
        vec![
            self.in_proj,
            self.conv_weight,
            self.conv_bias,
            s.a_log,
            s.delta_proj,
            s.delta_bias,
            s.b_proj,
            s.c_proj,
            s.d_skip,
            self.out_proj,
            self.norm_gain,
        ]
    }

    /// Output before the closing RMS normalization. `e` is `[.., tokens, d_model]`.
    pub fn forward_pre_norm(&self, g: &mut Graph, p: &BoundParams, e: &Tensor, scale: Option<&Tensor>) -> Result<Tensor> {
        let d_model = self.dims.d_model;
        if e.shape().last() != Some(&d_model) || e.rank() < 2 {
            return Err(Error::shape("mamba_block", e.shape(), &[0, d_model]));
        }
        let di = self.dims.d_inner;
        let xz = g.matmul(e, p.get(self.in_proj))?;
        let x = g.narrow(&xz, 0, di)?;
        let gate = g.narrow(&xz, di, di)?;
        let x = causal_conv(g, &x, p.get(self.conv_weight), p.get(self.conv_bias))?;
        let x = g.silu(&x)?;
        let sel = selective_params(g, p, &x, &self.ssm, scale)?;
        let y = selective_scan(g, p, &x, &self.ssm, &sel)?;
        let gate = g.silu(&gate)?;
        let y = g.mul(&y, &gate)?;
        g.matmul(&y, p.get(self.out_proj))
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, e: &Tensor, scale: Option<&Tensor>) -> Result<Tensor> {
        let y = self.forward_pre_norm(g, p, e, scale)?;
        g.rms_norm(&y, p.get(self.norm_gain), NORM_EPS)
    }
}
