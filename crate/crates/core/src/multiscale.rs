//! Parallel Mamba blocks at distinct step-size scales, averaged, optionally
//! run over the token axis in both directions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::ssm::{BlockDims, MambaBlock};
use crate::tensor::{BoundParams, Graph, ParamId, ParamStore, Tensor};

/// How the `n` per-block step multipliers are obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScaleStrategy {
    /// Constant multipliers; `alphas[0]` must be 1.
    Fixed { alphas: Vec<f64> },
    /// Trained multipliers, initialized uniformly in `[1, 4]`.
    Learnable,
    /// `softplus(W₂·relu(W₁·flatten(E) + b₁) + b₂)`.
    Dynamic { hidden: usize },
}

impl ScaleStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            ScaleStrategy::Fixed { .. } => "fixed",
            ScaleStrategy::Learnable => "learnable",
            ScaleStrategy::Dynamic { .. } => "dynamic",
        }
    }

    /// Checks the strategy against the scale count `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            ScaleStrategy::Fixed { alphas } => {
                if alphas.len() != n {
                    return Err(Error::Config(format!("{} alphas given for {} scales", alphas.len(), n)));
                }
                if let Some(a) = alphas.iter().find(|a| !(**a > 0.0) || !a.is_finite()) {
                    return Err(Error::Config(format!("alphas must be positive and finite, got {}", a)));
                }
                if alphas[0] != 1.0 {
                    return Err(Error::Config(format!("alpha_1 must be 1, got {}", alphas[0])));
                }
                Ok(())
            }
            ScaleStrategy::Learnable => Ok(()),
            ScaleStrategy::Dynamic { hidden } if *hidden == 0 => {
                Err(Error::Config("dynamic scale MLP needs a positive hidden width".into()))
            }
            ScaleStrategy::Dynamic { .. } => Ok(()),
        }
    }

    /// Default multipliers `1, 2, 4, …` for `n` scales.
    pub fn doubling(n: usize) -> Self {
        ScaleStrategy::Fixed {
            alphas: (0..n).map(|i| (1u64 << i.min(62)) as f64).collect(),
        }
    }
}

/// Parameters behind a [`ScaleStrategy`].
#[derive(Clone, Debug)]
pub enum ScaleParams {
    Fixed(Vec<f64>),
    Learnable(ParamId),
    Dynamic { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Debug)]
pub struct MultiScaleLayer {
    pub n: usize,
    /// Token count (variates) seen by the blocks.
    pub tokens: usize,
    pub dims: BlockDims,
    pub forward_blocks: Vec<MambaBlock>,
    pub backward_blocks: Vec<MambaBlock>,
    pub scales: ScaleParams,
    pub bidirectional: bool,
}

impl MultiScaleLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        n: usize,
        tokens: usize,
        dims: BlockDims,
        strategy: &ScaleStrategy,
        bidirectional: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("scale count must be at least 1".into()));
        }
        strategy.validate(n)?;
        let forward_blocks = (0..n)
            .map(|i| MambaBlock::init(store, &format!("{prefix}.fwd{i}"), dims, rng))
            .collect();
        let backward_blocks = if bidirectional {
            (0..n)
                .map(|i| MambaBlock::init(store, &format!("{prefix}.bwd{i}"), dims, rng))
                .collect()
        } else {
            Vec::new()
        };
        let scales = match strategy {
            ScaleStrategy::Fixed { alphas } => ScaleParams::Fixed(alphas.clone()),
            ScaleStrategy::Learnable => {
                let m = (0..n).map(|_| rng.gen_range(1.0..=4.0)).collect();
                ScaleParams::Learnable(store.add(format!("{prefix}.scales"), Tensor::from_vec(m)))
            }
            ScaleStrategy::Dynamic { hidden } => {
                let flat = tokens * dims.d_model;
                let b1_bound = 1.0 / (flat as f64).sqrt();
                let b2_bound = 1.0 / (*hidden as f64).sqrt();
                ScaleParams::Dynamic {
                    w1: store.add(format!("{prefix}.scale_mlp.w1"), init::linear(rng, flat, *hidden)),
                    b1: store.add(format!("{prefix}.scale_mlp.b1"), init::uniform(rng, &[*hidden], b1_bound)),
                    w2: store.add(format!("{prefix}.scale_mlp.w2"), init::linear(rng, *hidden, n)),
                    b2: store.add(format!("{prefix}.scale_mlp.b2"), init::uniform(rng, &[n], b2_bound)),
                }
            }
        };
        Ok(MultiScaleLayer {
            n,
            tokens,
            dims,
            forward_blocks,
            backward_blocks,
            scales,
            bidirectional,
        })
    }

    /// The `n` multipliers for this call as a `[n]` tensor. `e` is
    /// `[tokens, d_model]` or `[batch, tokens, d_model]`; dynamic scales are
    /// averaged over the batch.
    pub fn resolve_scales(&self, g: &mut Graph, p: &BoundParams, e: &Tensor) -> Result<Tensor> {
        match &self.scales {
            ScaleParams::Fixed(alphas) => Ok(Tensor::from_vec(alphas.clone())),
            ScaleParams::Learnable(id) => Ok(p.get(*id).clone()),
            ScaleParams::Dynamic { w1, b1, w2, b2 } => {
                let flat = self.tokens * self.dims.d_model;
                let batch = e.numel() / flat.max(1);
                if e.rank() < 2 || e.numel() != batch * flat || e.shape()[e.rank() - 2..] != [self.tokens, self.dims.d_model] {
                    return Err(Error::shape("resolve_scales", e.shape(), &[self.tokens, self.dims.d_model]));
                }
                let x = g.reshape(e, &[batch, flat])?;
                let h = g.matmul(&x, p.get(*w1))?;
                let h = g.add(&h, p.get(*b1))?;
                let h = g.relu(&h)?;
                let s = g.matmul(&h, p.get(*w2))?;
                let s = g.add(&s, p.get(*b2))?;
                let s = g.softplus(&s)?;
                g.mean_axis0(&s)
            }
        }
    }

    /// Mean of the direction's blocks, each at its own scale.
    pub fn multiscale_forward(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        e: &Tensor,
        scales: &Tensor,
        direction: Direction,
    ) -> Result<Tensor> {
        let blocks = match direction {
            Direction::Forward => &self.forward_blocks,
            Direction::Backward => &self.backward_blocks,
        };
        if blocks.is_empty() {
            return Err(Error::Config("layer has no backward blocks (bidirectional is off)".into()));
        }
        if scales.numel() != blocks.len() {
            return Err(Error::shape("multiscale_forward", &[blocks.len()], scales.shape()));
        }
        if e.rank() < 2 {
            return Err(Error::Rank {
                op: "multiscale_forward",
                detail: format!("expected [.., tokens, d_model], got {:?}", e.shape()),
            });
        }
        let token_axis = e.rank() - 2;
        let input = match direction {
            Direction::Forward => e.clone(),
            Direction::Backward => g.reverse(e, token_axis)?,
        };
        let mut acc: Option<Tensor> = None;
        for (i, block) in blocks.iter().enumerate() {
            let s = g.select(scales, i)?;
            let y = block.forward(g, p, &input, Some(&s))?;
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(&a, &y)?,
            });
        }
        let mean = g.scale(&acc.expect("at least one block"), 1.0 / blocks.len() as f64)?;
        match direction {
            Direction::Forward => Ok(mean),
            Direction::Backward => g.reverse(&mean, token_axis),
        }
    }

    /// Forward output plus, when bidirectional, the backward output.
    pub fn forward_with_scales(&self, g: &mut Graph, p: &BoundParams, e: &Tensor) -> Result<(Tensor, Tensor)> {
        let scales = self.resolve_scales(g, p, e)?;
        let fwd = self.multiscale_forward(g, p, e, &scales, Direction::Forward)?;
        let out = if self.bidirectional {
            let bwd = self.multiscale_forward(g, p, e, &scales, Direction::Backward)?;
            g.add(&fwd, &bwd)?
        } else {
            fwd
        };
        Ok((out, scales))
    }

    pub fn forward(&self, g: &mut Graph, p: &BoundParams, e: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_scales(g, p, e)?.0)
    }

    /// Scalar count of the layer's own parameters.
    pub fn param_count(dims: BlockDims, n: usize, tokens: usize, strategy: &ScaleStrategy, bidirectional: bool) -> usize {
        let directions = if bidirectional { 2 } else { 1 };
        let scales = match strategy {
            ScaleStrategy::Fixed { .. } => 0,
            ScaleStrategy::Learnable => n,
            ScaleStrategy::Dynamic { hidden } => tokens * dims.d_model * hidden + hidden + hidden * n + n,
        };
        directions * n * dims.param_count() + scales
    }

    /// Multiply-accumulates of one forward call at batch 1.
    pub fn macs(dims: BlockDims, n: usize, tokens: usize, strategy: &ScaleStrategy, bidirectional: bool) -> u64 {
        let directions = if bidirectional { 2 } else { 1 };
        let scales = match strategy {
            ScaleStrategy::Dynamic { hidden } => (tokens * dims.d_model * hidden + hidden * n) as u64,
            _ => 0,
        };
        directions * n as u64 * dims.macs(tokens) + scales
    }
}
