use crate::error::{Error, Result};
use crate::tensor::{GradientMap, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling applied before the update.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: None,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradientMap) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Graph(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        let mut sq_norm = 0.0;
        for id in store.ids() {
            let g = grads
                .get(id)
                .ok_or_else(|| Error::Graph(format!("missing gradient for {}", store.name(id))))?;
            if g.shape() != store.get(id).shape() {
                return Err(Error::Graph(format!("gradient shape mismatch for {}", store.name(id))));
            }
            if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("gradient of {} is {}", store.name(id), bad)));
            }
            sq_norm += g.data().iter().map(|v| v * v).sum::<f64>();
        }
        let factor = match self.cfg.clip {
            Some(c) if sq_norm.sqrt() > c => c / sq_norm.sqrt(),
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.cfg;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        for id in store.ids() {
            let g = grads.get(id).expect("checked above").data();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let mut theta = store.get(id).to_vec();
            for i in 0..theta.len() {
                let gi = g[i] * factor;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                theta[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
            store.set_data(id, theta)?;
        }
        Ok(())
    }
}
