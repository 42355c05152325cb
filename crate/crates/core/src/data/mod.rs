//! Time-series ingestion, chronological splitting, normalization, and
//! sliding windows.

mod csv_io;
mod synth;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use csv_io::{load_csv, parse_csv, write_matrix_csv};
pub use synth::{synth_multiscale, SynthSpec};

/// Standard deviations below this are treated as a constant variate.
pub const MIN_STD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitBounds {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitBounds {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

/// Per-variate statistics of the train range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Variates whose train-range std fell below [`MIN_STD`] and was set to 1.
    #[serde(default)]
    pub degenerate: Vec<usize>,
}

impl NormStats {
    /// `(x − μ)/σ` over a row-major `[.., D]` buffer.
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        values.iter().enumerate().map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d]).collect()
    }

    /// `x·σ + μ` over a row-major `[.., D]` buffer.
    pub fn invert(&self, values: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        values.iter().enumerate().map(|(i, v)| v * self.std[i % d] + self.mean[i % d]).collect()
    }
}

/// A `timesteps × D` matrix with optional split boundaries and
/// normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    values: Vec<f64>,
    timesteps: usize,
    names: Vec<String>,
    pub resolution: String,
    splits: Option<SplitBounds>,
    norm: Option<NormStats>,
}

impl TimeSeriesDataset {
    /// `values` is row-major, one row per timestep.
    pub fn new(values: Vec<f64>, names: Vec<String>, resolution: impl Into<String>) -> Result<Self> {
        let d = names.len();
        if d == 0 || values.is_empty() || values.len() % d != 0 {
            return Err(Error::Data(format!(
                "{} values cannot form rows of {} variates",
                values.len(),
                d
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at row {}, column {}", i / d + 1, i % d + 1)));
        }
        Ok(TimeSeriesDataset {
            timesteps: values.len() / d,
            values,
            names,
            resolution: resolution.into(),
            splits: None,
            norm: None,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn variates(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, t: usize, d: usize) -> f64 {
        self.values[t * self.variates() + d]
    }

    pub fn rows(&self, range: Range<usize>) -> &[f64] {
        let d = self.variates();
        &self.values[range.start * d..range.end * d]
    }

    pub fn splits(&self) -> Option<&SplitBounds> {
        self.splits.as_ref()
    }

    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    /// Splits chronologically into train / val / test by `ratios`. Boundaries
    /// are `⌊n·r₁⌋` and `⌊n·(r₁ + r₂)⌋`; every split must hold at least
    /// `min_len` timesteps (one `L + T` window).
    pub fn chronological_split(mut self, ratios: [f64; 3], min_len: usize) -> Result<Self> {
        if ratios.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::Config(format!("split ratios must all be positive, got {:?}", ratios)));
        }
        if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must sum to 1, got {:?}", ratios)));
        }
        let n = self.timesteps;
        // The tolerance keeps e.g. 100·0.7 = 70.00000000000001 or 69.999… at 70.
        let b1 = (n as f64 * ratios[0] + 1e-9).floor() as usize;
        let b2 = ((n as f64 * (ratios[0] + ratios[1]) + 1e-9).floor() as usize).min(n);
        let bounds = SplitBounds {
            train: 0..b1,
            val: b1..b2,
            test: b2..n,
        };
        for split in [Split::Train, Split::Val, Split::Test] {
            let len = bounds.range(split).len();
            if len < min_len.max(1) {
                return Err(Error::Config(format!(
                    "{} split has {} timesteps, needs at least {}",
                    split.name(),
                    len,
                    min_len.max(1)
                )));
            }
        }
        self.splits = Some(bounds);
        Ok(self)
    }

    /// Standardizes every variate with mean and population std of the train
    /// range. Requires split boundaries.
    pub fn standardize(mut self) -> Result<Self> {
        if self.norm.is_some() {
            return Err(Error::Data("dataset is already standardized".into()));
        }
        let train = self
            .splits
            .as_ref()
            .ok_or_else(|| Error::Data("standardize needs split boundaries".into()))?
            .train
            .clone();
        let d = self.variates();
        let rows = self.rows(train.clone());
        let count = train.len() as f64;
        let mut mean = vec![0.0; d];
        for row in rows.chunks_exact(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; d];
        for row in rows.chunks_exact(d) {
            for j in 0..d {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let mut degenerate = Vec::new();
        let std = var
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let s = (v / count).sqrt();
                if s < MIN_STD {
                    degenerate.push(j);
                    1.0
                } else {
                    s
                }
            })
            .collect();
        let stats = NormStats {
            names: self.names.clone(),
            mean,
            std,
            degenerate,
        };
        self.values = stats.apply(&self.values);
        self.norm = Some(stats);
        Ok(self)
    }

    /// Original-scale values of a standardized dataset.
    pub fn denormalized_values(&self) -> Vec<f64> {
        match &self.norm {
            Some(n) => n.invert(&self.values),
            None => self.values.clone(),
        }
    }

    /// Uses externally supplied statistics (e.g. from a checkpoint).
    pub fn standardize_with(mut self, stats: NormStats) -> Result<Self> {
        if stats.mean.len() != self.variates() || stats.std.len() != self.variates() {
            return Err(Error::Config(format!(
                "normalization has {} variates, dataset has {}",
                stats.mean.len(),
                self.variates()
            )));
        }
        if self.norm.is_some() {
            return Err(Error::Data("dataset is already standardized".into()));
        }
        self.values = stats.apply(&self.values);
        self.norm = Some(stats);
        Ok(self)
    }

    /// Window origins (absolute timestep of each input start) inside
    /// `split`, ordered ascending.
    pub fn window(&self, split: Split, lookback: usize, horizon: usize, stride: usize) -> Result<Vec<usize>> {
        let range = self
            .splits
            .as_ref()
            .ok_or_else(|| Error::Data("windowing needs split boundaries".into()))?
            .range(split);
        window_origins(range, lookback, horizon, stride, split.name())
    }

    /// Stacks windows starting at `origins` into a batch.
    pub fn batch(&self, origins: &[usize], lookback: usize, horizon: usize) -> Result<WindowBatch> {
        let d = self.variates();
        if origins.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let mut inputs = Vec::with_capacity(origins.len() * lookback * d);
        let mut targets = Vec::with_capacity(origins.len() * horizon * d);
        for &o in origins {
            if o + lookback + horizon > self.timesteps {
                return Err(Error::Config(format!(
                    "window at {} needs {} timesteps, dataset has {}",
                    o,
                    o + lookback + horizon,
                    self.timesteps
                )));
            }
            inputs.extend_from_slice(self.rows(o..o + lookback));
            targets.extend_from_slice(self.rows(o + lookback..o + lookback + horizon));
        }
        Ok(WindowBatch {
            inputs: Tensor::new(vec![origins.len(), lookback, d], inputs)?,
            targets: Tensor::new(vec![origins.len(), horizon, d], targets)?,
            origins: origins.to_vec(),
        })
    }
}

/// Origins of every `(L + T)` window in `range` at the given stride.
pub fn window_origins(range: Range<usize>, lookback: usize, horizon: usize, stride: usize, label: &str) -> Result<Vec<usize>> {
    if stride == 0 || lookback == 0 || horizon == 0 {
        return Err(Error::Config("lookback, horizon and stride must be at least 1".into()));
    }
    let need = lookback + horizon;
    if range.len() < need {
        return Err(Error::Config(format!(
            "{} range has {} timesteps, needs at least {} (lookback {} + horizon {})",
            label,
            range.len(),
            need,
            lookback,
            horizon
        )));
    }
    let count = (range.len() - need) / stride + 1;
    Ok((0..count).map(|k| range.start + k * stride).collect())
}

/// Inputs `[B, L, D]`, targets `[B, T, D]`.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub origins: Vec<usize>,
}
