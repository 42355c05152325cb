use serde::Serialize;

use super::ModelConfig;
use crate::error::Result;
use crate::multiscale::MultiScaleLayer;

/// Analytic size and compute of one model configuration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub params: usize,
    /// Multiply-accumulates of one forward pass at batch 1: affine maps,
    /// convolution taps, and `3·d_state + 1` per scan step and channel.
    pub macs: u64,
    pub memory_bytes: usize,
    pub precision: &'static str,
}

pub fn cost_report(config: &ModelConfig) -> Result<CostReport> {
    config.validate()?;
    let dims = config.block_dims()?;
    let (l, t, d, de, f) = (config.lookback, config.horizon, config.variates, config.d_model, config.ffn_hidden);
    let mixer_params = MultiScaleLayer::param_count(dims, config.scales, d, &config.strategy, config.bidirectional);
    let mixer_macs = MultiScaleLayer::macs(dims, config.scales, d, &config.strategy, config.bidirectional);
    let layer_params = mixer_params + 2 * de + de * f + f + f * de + de;
    let layer_macs = mixer_macs + (d * (de * f + f * de)) as u64;
    let params = l * de + de + config.layers * layer_params + de * t + t;
    let macs = (d * l * de) as u64 + config.layers as u64 * layer_macs + (d * de * t) as u64;
    Ok(CostReport {
        params,
        macs,
        memory_bytes: params * std::mem::size_of::<f64>(),
        precision: "f64",
    })
}
