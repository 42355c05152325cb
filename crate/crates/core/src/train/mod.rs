//! Adam optimization, early stopping, evaluation, and run logs.

mod adam;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Split, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::model::{mse_loss, ForecastModel};
use crate::multiscale::ScaleStrategy;
use crate::rng::rng_for;
use crate::tensor::{Graph, ParamStore};

pub use adam::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    pub clip: Option<f64>,
    /// Caps optimizer steps per epoch; `None` walks every train window.
    pub max_steps_per_epoch: Option<usize>,
    /// Record scales every this many steps.
    pub log_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            seed: 0,
            clip: None,
            max_steps_per_epoch: None,
            log_interval: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.log_interval == 0 {
            return Err(Error::Config("batch size, epochs and log interval must be at least 1".into()));
        }
        if self.max_steps_per_epoch == Some(0) {
            return Err(Error::Config("steps per epoch must be at least 1".into()));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleRecord {
    pub step: u64,
    /// Scales of every encoder layer, layer-major.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunHistory {
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub best_epoch: usize,
    pub steps: u64,
    /// Empty for fixed scales.
    pub scales: Vec<ScaleRecord>,
    /// Scale count per layer, for column naming.
    pub scales_per_layer: usize,
}

impl RunHistory {
    pub fn best_val(&self) -> f64 {
        self.val_mse[self.best_epoch]
    }

    /// `epoch,train_mse,val_mse`, epochs counted from 1.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse\n");
        for (i, (t, v)) in self.train_mse.iter().zip(&self.val_mse).enumerate() {
            let _ = writeln!(s, "{},{},{}", i + 1, t, v);
        }
        s
    }

    /// `step,scale_1..scale_n` (deeper layers append `layerK_scale_i`), or
    /// `None` when no scales were logged.
    pub fn trajectory_csv(&self) -> Option<String> {
        let first = self.scales.first()?;
        let n = self.scales_per_layer.max(1);
        let mut s = String::from("step");
        for c in 0..first.values.len() {
            let (layer, i) = (c / n, c % n + 1);
            if layer == 0 {
                let _ = write!(s, ",scale_{i}");
            } else {
                let _ = write!(s, ",layer{}_scale_{i}", layer + 1);
            }
        }
        s.push('\n');
        for r in &self.scales {
            let _ = write!(s, "{}", r.step);
            for v in &r.values {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        Some(s)
    }
}

/// Writes the scale trajectory. Returns `false` (writing nothing) when the
/// run logged no scales, as with the fixed strategy.
pub fn log_scale_trajectory(history: &RunHistory, path: impl AsRef<std::path::Path>) -> Result<bool> {
    match history.trajectory_csv() {
        Some(csv) => {
            crate::artifact::write_atomic(path, csv.as_bytes())?;
            Ok(true)
        }
        None => Ok(false),
    }
}

fn logs_scales(model: &ForecastModel) -> bool {
    !matches!(model.config.strategy, ScaleStrategy::Fixed { .. })
}

/// Trains in place and restores the parameters of the best validation epoch.
pub fn train(model: &ForecastModel, store: &mut ParamStore, ds: &TimeSeriesDataset, cfg: &TrainConfig) -> Result<RunHistory> {
    cfg.validate()?;
    let (l, t) = (model.config.lookback, model.config.horizon);
    if ds.variates() != model.config.variates {
        return Err(Error::Config(format!(
            "model expects {} variates, dataset has {}",
            model.config.variates,
            ds.variates()
        )));
    }
    let train_origins = ds.window(Split::Train, l, t, 1)?;
    ds.window(Split::Val, l, t, 1)?;
    let mut adam = Adam::new(
        store,
        AdamConfig {
            lr: cfg.lr,
            clip: cfg.clip,
            ..AdamConfig::default()
        },
    );
    let mut history = RunHistory {
        scales_per_layer: model.config.scales,
        ..RunHistory::default()
    };
    let mut best_store = store.clone();
    let mut best_val = f64::INFINITY;
    let mut bad_epochs = 0;
    let log = logs_scales(model);
    for epoch in 0..cfg.max_epochs {
        let mut order = train_origins.clone();
        order.shuffle(&mut rng_for(cfg.seed, &format!("shuffle/{epoch}")));
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if let Some(cap) = cfg.max_steps_per_epoch {
            batches.truncate(cap);
        }
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for origins in batches {
            let batch = ds.batch(origins, l, t)?;
            let mut g = Graph::new();
            let p = g.bind(store);
            let (yhat, scales) = model
                .forward_with_scales(&mut g, &p, &batch.inputs)
                .map_err(|e| match e {
                    Error::Domain(msg) => Error::Numeric(format!("diverged at step {}: {msg}", history.steps)),
                    other => other,
                })?;
            let loss = mse_loss(&mut g, &yhat, &batch.targets)?;
            let lv = loss.item()?;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("loss is {lv} at step {}", history.steps)));
            }
            if log && history.steps % cfg.log_interval as u64 == 0 {
                history.scales.push(ScaleRecord {
                    step: history.steps,
                    values: scales.iter().flat_map(|s| s.to_vec()).collect(),
                });
            }
            let grads = g.backward(&loss)?;
            adam.step(store, &grads)?;
            loss_sum += lv * origins.len() as f64;
            seen += origins.len();
            history.steps += 1;
        }
        history.train_mse.push(loss_sum / seen as f64);
        let val = evaluate(model, store, ds, Split::Val)?.mse;
        history.val_mse.push(val);
        if val < best_val {
            best_val = val;
            history.best_epoch = epoch;
            best_store = store.clone();
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.patience {
                break;
            }
        }
    }
    *store = best_store;
    Ok(history)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

const EVAL_BATCH: usize = 64;

/// Mean over every stride-1 window of `split` of the per-window MSE and MAE,
/// in the dataset's (normalized) space.
pub fn evaluate(model: &ForecastModel, store: &ParamStore, ds: &TimeSeriesDataset, split: Split) -> Result<Metrics> {
    Ok(evaluate_full(model, store, ds, split, false)?.0)
}

/// Like [`evaluate`]; with `denormalize` also reports metrics on the
/// original scale (requires normalization statistics).
pub fn evaluate_full(
    model: &ForecastModel,
    store: &ParamStore,
    ds: &TimeSeriesDataset,
    split: Split,
    denormalize: bool,
) -> Result<(Metrics, Option<Metrics>)> {
    let (l, t) = (model.config.lookback, model.config.horizon);
    let origins = ds.window(split, l, t, 1)?;
    let norm = if denormalize {
        Some(ds.norm().ok_or_else(|| Error::Data("dataset has no normalization statistics".into()))?)
    } else {
        None
    };
    // Dynamic scales average over the batch, so windows are scored one at a
    // time to keep each forecast independent of its neighbours.
    let chunk = match model.config.strategy {
        ScaleStrategy::Dynamic { .. } => 1,
        _ => EVAL_BATCH,
    };
    let per = t * ds.variates();
    let (mut mse, mut mae, mut raw_mse, mut raw_mae) = (0.0, 0.0, 0.0, 0.0);
    for origins_chunk in origins.chunks(chunk) {
        let batch = ds.batch(origins_chunk, l, t)?;
        let yhat = model.predict(store, &batch.inputs)?;
        for (pred, target) in yhat.data().chunks(per).zip(batch.targets.data().chunks(per)) {
            let (se, ae) = window_errors(pred, target);
            mse += se;
            mae += ae;
            if let Some(n) = norm {
                let (se, ae) = window_errors(&n.invert(pred), &n.invert(target));
                raw_mse += se;
                raw_mae += ae;
            }
        }
    }
    let count = origins.len() as f64;
    let metrics = Metrics {
        mse: mse / count,
        mae: mae / count,
        windows: origins.len(),
    };
    let raw = norm.map(|_| Metrics {
        mse: raw_mse / count,
        mae: raw_mae / count,
        windows: origins.len(),
    });
    Ok((metrics, raw))
}

fn window_errors(pred: &[f64], target: &[f64]) -> (f64, f64) {
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, y) in pred.iter().zip(target) {
        se += (p - y) * (p - y);
        ae += (p - y).abs();
    }
    (se / n, ae / n)
}
