//! Flag definitions. Every long flag doubles as a `--config` / manifest key.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use msmamba_core::data::{Split, SynthSpec};
use msmamba_core::model::ModelConfig;
use msmamba_core::multiscale::ScaleStrategy;
use msmamba_core::train::TrainConfig;
use msmamba_core::{Error, Result};

use crate::flags::{List, Manifest, Maybe};

#[derive(Parser, Debug)]
#[command(name = "msmamba", version, about = "Multi-scale Mamba time-series forecaster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes checkpoint, history, scale trajectory and manifest.
    #[command(args_override_self = true)]
    Train(TrainCmd),
    /// Score one or more checkpoints on a data split.
    #[command(args_override_self = true)]
    Eval(EvalCmd),
    /// Forecast the next T steps from a given origin.
    #[command(args_override_self = true)]
    Forecast(ForecastCmd),
    /// Write a synthetic multi-period dataset.
    #[command(args_override_self = true)]
    Synth(SynthCmd),
    /// Compare analytic and finite-difference gradients on a tiny model.
    #[command(args_override_self = true)]
    Gradcheck(GradcheckCmd),
    /// Tabulate parameters, MACs and memory over a grid of configurations.
    #[command(args_override_self = true)]
    Profile(ProfileCmd),
    /// Train one model per (scale count, seed) and compare validation MSE.
    #[command(args_override_self = true)]
    SweepScales(SweepCmd),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyKind {
    Fixed,
    Learnable,
    Dynamic,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Fixed => "fixed",
            StrategyKind::Learnable => "learnable",
            StrategyKind::Dynamic => "dynamic",
        }
    }

    pub fn resolve(self, scales: usize, alphas: &Maybe<List<f64>>, hidden: usize) -> Result<ScaleStrategy> {
        match (self, &alphas.0) {
            (StrategyKind::Fixed, Some(a)) => Ok(ScaleStrategy::Fixed { alphas: a.0.clone() }),
            (StrategyKind::Fixed, None) => Ok(ScaleStrategy::doubling(scales)),
            (_, Some(_)) => Err(Error::Config(format!("--alphas only applies to the fixed strategy, not {}", self.name()))),
            (StrategyKind::Learnable, None) => Ok(ScaleStrategy::Learnable),
            (StrategyKind::Dynamic, None) => Ok(ScaleStrategy::Dynamic { hidden }),
        }
    }
}

fn echo_strategy(m: &mut Manifest, strategy: &ScaleStrategy, hidden: usize) {
    m.put("strategy", strategy.name());
    match strategy {
        ScaleStrategy::Fixed { alphas } => m.put("alphas", List(alphas.clone())),
        _ => m.put("alphas", "none"),
    }
    m.put("hidden", hidden);
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Root seed; every random stream is derived from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (falls back to $MSMAMBA_OUT, then ./msmamba-out).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10_000)]
    pub synth_length: usize,
    #[arg(long, default_value_t = 4)]
    pub synth_variates: usize,
    /// Sinusoid periods in steps.
    #[arg(long, default_value = "8,64")]
    pub synth_periods: List<f64>,
    /// One amplitude per period; `none` means all ones.
    #[arg(long, default_value = "none")]
    pub synth_amplitudes: Maybe<List<f64>>,
    /// Gaussian noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    pub synth_noise: f64,
}

impl SynthArgs {
    pub fn spec(&self, seed: u64) -> SynthSpec {
        let periods = self.synth_periods.0.clone();
        let amplitudes = match &self.synth_amplitudes.0 {
            Some(a) => a.0.clone(),
            None => vec![1.0; periods.len()],
        };
        SynthSpec {
            length: self.synth_length,
            variates: self.synth_variates,
            periods,
            amplitudes,
            noise: self.synth_noise,
            seed,
        }
    }

    pub fn echo(&self, m: &mut Manifest) {
        m.put("synth-length", self.synth_length);
        m.put("synth-variates", self.synth_variates);
        m.put("synth-periods", &self.synth_periods);
        m.put("synth-amplitudes", &self.synth_amplitudes);
        m.put("synth-noise", self.synth_noise);
    }
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// CSV file with one column per variate (a leading timestamp column is dropped).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use the built-in multi-period generator instead of --data.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = ArgAction::Set)]
    pub synthetic: bool,
    #[command(flatten)]
    pub synth: SynthArgs,
    /// Train, validation and test fractions.
    #[arg(long, default_value = "0.7,0.1,0.2")]
    pub split_ratios: List<f64>,
}

impl DataArgs {
    pub fn ratios(&self) -> Result<[f64; 3]> {
        <[f64; 3]>::try_from(self.split_ratios.0.as_slice())
            .map_err(|_| Error::Config(format!("--split-ratios needs three values, got {}", self.split_ratios)))
    }

    pub fn echo(&self, m: &mut Manifest) {
        if let Some(p) = &self.data {
            m.put("data", p.display());
        }
        m.put("synthetic", self.synthetic);
        self.synth.echo(m);
        m.put("split-ratios", &self.split_ratios);
    }
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Lookback window length.
    #[arg(long = "L", default_value_t = 96)]
    pub lookback: usize,
    /// Forecast horizon.
    #[arg(long = "T", default_value_t = 96)]
    pub horizon: usize,
    /// Token embedding width.
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    /// Encoder layers.
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    /// Parallel blocks per direction.
    #[arg(long, default_value_t = 4)]
    pub scales: usize,
    #[arg(long, value_enum, default_value_t = StrategyKind::Learnable)]
    pub strategy: StrategyKind,
    /// Fixed-strategy multipliers; the default doubles from 1.
    #[arg(long, default_value = "none")]
    pub alphas: Maybe<List<f64>>,
    /// Hidden width of the dynamic-scale MLP.
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 16)]
    pub d_state: usize,
    #[arg(long, default_value_t = 4)]
    pub conv_width: usize,
    #[arg(long, default_value_t = 2)]
    pub expand: usize,
    #[arg(long, default_value_t = 32)]
    pub ffn_hidden: usize,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub bidirectional: bool,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub residual: bool,
    #[arg(long, default_value_t = 1e-3)]
    pub dt_min: f64,
    #[arg(long, default_value_t = 1e-1)]
    pub dt_max: f64,
}

impl ModelArgs {
    pub fn config(&self, variates: usize) -> Result<ModelConfig> {
        self.config_with_scales(variates, self.scales)
    }

    pub fn config_with_scales(&self, variates: usize, scales: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::new(self.lookback, self.horizon, variates);
        c.d_model = self.d_model;
        c.layers = self.layers;
        c.scales = scales;
        c.strategy = self.strategy.resolve(scales, &self.alphas, self.hidden)?;
        c.d_state = self.d_state;
        c.conv_width = self.conv_width;
        c.expand = self.expand;
        c.ffn_hidden = self.ffn_hidden;
        c.bidirectional = self.bidirectional;
        c.residual = self.residual;
        c.dt_min = self.dt_min;
        c.dt_max = self.dt_max;
        c.validate()?;
        Ok(c)
    }

    /// Echoes the resolved config rather than the raw flags, so defaults
    /// that depend on other flags (the doubling alphas) are pinned.
    pub fn echo(&self, m: &mut Manifest, c: &ModelConfig) {
        m.put("L", c.lookback);
        m.put("T", c.horizon);
        m.put("d-model", c.d_model);
        m.put("layers", c.layers);
        m.put("scales", c.scales);
        echo_strategy(m, &c.strategy, self.hidden);
        m.put("d-state", c.d_state);
        m.put("conv-width", c.conv_width);
        m.put("expand", c.expand);
        m.put("ffn-hidden", c.ffn_hidden);
        m.put("bidirectional", c.bidirectional);
        m.put("residual", c.residual);
        m.put("dt-min", c.dt_min);
        m.put("dt-max", c.dt_max);
    }
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    /// Global gradient-norm clip.
    #[arg(long, default_value = "none")]
    pub clip: Maybe<f64>,
    /// Cap on optimizer steps per epoch.
    #[arg(long, default_value = "none")]
    pub max_steps_per_epoch: Maybe<usize>,
    /// Log scales every this many steps.
    #[arg(long, default_value_t = 1)]
    pub log_interval: usize,
}

impl TrainArgs {
    pub fn config(&self, seed: u64) -> Result<TrainConfig> {
        let c = TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            seed,
            clip: self.clip.0,
            max_steps_per_epoch: self.max_steps_per_epoch.0,
            log_interval: self.log_interval,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn echo(&self, m: &mut Manifest) {
        m.put("lr", self.lr);
        m.put("batch-size", self.batch_size);
        m.put("epochs", self.epochs);
        m.put("patience", self.patience);
        m.put("clip", &self.clip);
        m.put("max-steps-per-epoch", &self.max_steps_per_epoch);
        m.put("log-interval", self.log_interval);
    }
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    /// Checkpoint files, comma-separated; several give an Avg row.
    #[arg(long, required = true)]
    pub checkpoint: List<String>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Also report metrics on the original scale.
    #[arg(long, num_args = 0..=1, default_value_t = false, default_missing_value = "true", action = ArgAction::Set)]
    pub denormalize: bool,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct ForecastCmd {
    #[arg(long, required = true)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// First forecast step; the L rows before it are the input. Defaults
    /// to the end of the series.
    #[arg(long, default_value = "none")]
    pub origin: Maybe<usize>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct SynthCmd {
    #[command(flatten)]
    pub synth: SynthArgs,
    /// File name inside the output directory.
    #[arg(long, default_value = "synthetic.csv")]
    pub file: String,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct GradcheckCmd {
    /// fixed, learnable, dynamic, or all.
    #[arg(long, default_value = "all")]
    pub strategy: String,
    #[arg(long = "L", default_value_t = 8)]
    pub lookback: usize,
    #[arg(long = "T", default_value_t = 4)]
    pub horizon: usize,
    #[arg(long, default_value_t = 3)]
    pub variates: usize,
    #[arg(long, default_value_t = 16)]
    pub d_model: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub scales: usize,
    #[arg(long, default_value_t = 16)]
    pub d_state: usize,
    #[arg(long, default_value_t = 4)]
    pub conv_width: usize,
    #[arg(long, default_value_t = 2)]
    pub expand: usize,
    #[arg(long, default_value_t = 32)]
    pub ffn_hidden: usize,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub bidirectional: bool,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub residual: bool,
    #[arg(long, default_value_t = 1e-3)]
    pub dt_min: f64,
    #[arg(long, default_value_t = 1e-1)]
    pub dt_max: f64,
    /// Windows in the probe batch.
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Pass threshold on every tensor's relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Negative control: corrupt the backward rule of one op kind.
    #[arg(long, hide = true)]
    pub corrupt_backward: Option<String>,
    #[command(flatten)]
    pub run: RunArgs,
}

impl GradcheckCmd {
    pub fn strategies(&self) -> Result<Vec<StrategyKind>> {
        if self.strategy == "all" {
            return Ok(vec![StrategyKind::Fixed, StrategyKind::Learnable, StrategyKind::Dynamic]);
        }
        StrategyKind::from_str(&self.strategy, true)
            .map(|s| vec![s])
            .map_err(|_| Error::Config(format!("unknown strategy {:?} (fixed, learnable, dynamic, all)", self.strategy)))
    }

    pub fn config(&self, kind: StrategyKind) -> Result<ModelConfig> {
        let mut c = ModelConfig::new(self.lookback, self.horizon, self.variates);
        c.d_model = self.d_model;
        c.layers = self.layers;
        c.scales = self.scales;
        c.strategy = kind.resolve(self.scales, &Maybe(None), self.hidden)?;
        c.d_state = self.d_state;
        c.conv_width = self.conv_width;
        c.expand = self.expand;
        c.ffn_hidden = self.ffn_hidden;
        c.bidirectional = self.bidirectional;
        c.residual = self.residual;
        c.dt_min = self.dt_min;
        c.dt_max = self.dt_max;
        c.validate()?;
        Ok(c)
    }

    pub fn echo(&self, m: &mut Manifest) {
        m.put("strategy", &self.strategy);
        m.put("L", self.lookback);
        m.put("T", self.horizon);
        m.put("variates", self.variates);
        m.put("d-model", self.d_model);
        m.put("layers", self.layers);
        m.put("scales", self.scales);
        m.put("d-state", self.d_state);
        m.put("conv-width", self.conv_width);
        m.put("expand", self.expand);
        m.put("ffn-hidden", self.ffn_hidden);
        m.put("hidden", self.hidden);
        m.put("bidirectional", self.bidirectional);
        m.put("residual", self.residual);
        m.put("dt-min", self.dt_min);
        m.put("dt-max", self.dt_max);
        m.put("batch", self.batch);
        m.put("step", self.step);
        m.put("tol", self.tol);
        m.put("seed", self.run.seed);
    }
}

#[derive(Args, Debug)]
pub struct ProfileCmd {
    #[arg(long = "L", default_value = "96")]
    pub lookback: List<usize>,
    #[arg(long = "T", default_value = "96")]
    pub horizon: List<usize>,
    #[arg(long, default_value = "7")]
    pub variates: List<usize>,
    #[arg(long, default_value = "32")]
    pub d_model: List<usize>,
    #[arg(long, default_value = "1")]
    pub layers: List<usize>,
    #[arg(long, default_value = "1,4")]
    pub scales: List<usize>,
    #[arg(long, default_value = "16")]
    pub d_state: List<usize>,
    #[arg(long, value_enum, default_value_t = StrategyKind::Fixed)]
    pub strategy: StrategyKind,
    #[arg(long, default_value_t = 16)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub conv_width: usize,
    #[arg(long, default_value_t = 2)]
    pub expand: usize,
    #[arg(long, default_value_t = 32)]
    pub ffn_hidden: usize,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub bidirectional: bool,
    /// Timed forward passes per config; 0 skips timing.
    #[arg(long, default_value_t = 0)]
    pub time_forward: usize,
    /// Untimed passes before timing.
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args, Debug)]
pub struct SweepCmd {
    /// Scale counts to compare.
    #[arg(long, default_value = "2,3,4,5,6")]
    pub ns: List<usize>,
    /// Seeds per scale count.
    #[arg(long, default_value = "0,1,2")]
    pub seeds: List<u64>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub run: RunArgs,
}
