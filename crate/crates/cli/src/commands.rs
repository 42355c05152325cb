//! Subcommand bodies. Human-readable tables go to stdout; CSV artifacts go
//! to the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use msmamba_core::artifact::write_atomic;
use msmamba_core::data::{load_csv, synth_multiscale, write_matrix_csv, TimeSeriesDataset};
use msmamba_core::model::{cost_report, mse_loss, Checkpoint, ForecastModel, ModelConfig};
use msmamba_core::rng::rng_for;
use msmamba_core::tensor::{GradChecker, OpKind, Tensor};
use msmamba_core::train::{evaluate_full, log_scale_trajectory, train, Metrics};
use msmamba_core::{Error, Result};
use rand::Rng;

use crate::args::*;
use crate::flags::{Manifest, Maybe};

/// Parameter ceiling for gradient checks, which cost two forward passes per
/// coordinate.
const GRADCHECK_MAX_PARAMS: usize = 50_000;

#[derive(Debug)]
pub enum Failure {
    Core(Error),
    GradCheck { worst: f64, tol: f64, strategy: String },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Core(Error::Data(_) | Error::Io { .. }) => 3,
            Failure::Core(Error::Numeric(_) | Error::Domain(_)) => 4,
            Failure::Core(_) => 2,
            Failure::GradCheck { .. } => 5,
        }
    }

    /// `error[kind]: reason`, always on one line.
    pub fn line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Core(Error::Data(m)) => ("data", m.clone()),
            Failure::Core(e @ Error::Io { .. }) => ("data", e.to_string()),
            Failure::Core(Error::Numeric(m) | Error::Domain(m)) => ("numeric", m.clone()),
            Failure::Core(Error::Config(m)) => ("config", m.clone()),
            Failure::Core(e) => ("config", e.to_string()),
            Failure::GradCheck { worst, tol, strategy } => (
                "gradcheck",
                format!("worst relative error {worst:.3e} ({strategy}) exceeds tolerance {tol:e}"),
            ),
        };
        format!("error[{kind}]: {}", msg.replace(['\n', '\r'], " "))
    }
}

type Outcome = std::result::Result<(), Failure>;

pub fn run(cmd: Command) -> Outcome {
    match cmd {
        Command::Train(c) => cmd_train(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Forecast(c) => cmd_forecast(c),
        Command::Synth(c) => cmd_synth(c),
        Command::Gradcheck(c) => cmd_gradcheck(c),
        Command::Profile(c) => cmd_profile(c),
        Command::SweepScales(c) => cmd_sweep(c),
    }
}

fn out_dir(run: &RunArgs) -> Result<PathBuf> {
    let dir = run
        .out
        .clone()
        .or_else(|| std::env::var_os("MSMAMBA_OUT").filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("msmamba-out"));
    std::fs::create_dir_all(&dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    Ok(dir)
}

fn load_raw(d: &DataArgs, seed: u64) -> Result<TimeSeriesDataset> {
    match (&d.data, d.synthetic) {
        (Some(_), true) => Err(Error::Config("--data and --synthetic are mutually exclusive".into())),
        (None, false) => Err(Error::Config("no dataset given: pass --data FILE or --synthetic".into())),
        (Some(p), false) => load_csv(p),
        (None, true) => synth_multiscale(&d.synth.spec(seed)),
    }
}

fn csv_bytes(header: &[String], values: &[f64]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_matrix_csv(&mut buf, header, values)?;
    Ok(buf)
}

fn prepared(raw: TimeSeriesDataset, data: &DataArgs, cfg: &ModelConfig) -> Result<TimeSeriesDataset> {
    raw.chronological_split(data.ratios()?, cfg.lookback + cfg.horizon)?.standardize()
}

fn cmd_train(c: TrainCmd) -> Outcome {
    let seed = c.run.seed;
    let raw = load_raw(&c.data, seed)?;
    let mcfg = c.model.config(raw.variates())?;
    let tcfg = c.train.config(seed)?;
    let ds = prepared(raw, &c.data, &mcfg)?;
    let out = out_dir(&c.run)?;

    let mut m = Manifest::default();
    c.data.echo(&mut m);
    c.model.echo(&mut m, &mcfg);
    c.train.echo(&mut m);
    m.put("seed", seed);
    write_atomic(out.join("train-manifest.txt"), m.render("train").as_bytes())?;

    let (model, mut store) = ForecastModel::new(mcfg, seed)?;
    let history = train(&model, &mut store, &ds, &tcfg)?;
    Checkpoint::new(model, store, ds.norm().cloned()).save(out.join("model.ckpt"))?;
    write_atomic(out.join("history.csv"), history.to_csv().as_bytes())?;
    let logged = log_scale_trajectory(&history, out.join("scales.csv"))?;

    println!("{:>5}  {:>12}  {:>12}", "epoch", "train_mse", "val_mse");
    for (i, (t, v)) in history.train_mse.iter().zip(&history.val_mse).enumerate() {
        let mark = if i == history.best_epoch { "  *" } else { "" };
        println!("{:>5}  {:>12.6}  {:>12.6}{mark}", i + 1, t, v);
    }
    println!(
        "best epoch {} with val mse {:.6} after {} steps",
        history.best_epoch + 1,
        history.best_val(),
        history.steps
    );
    let extra = if logged { ", scales.csv" } else { "" };
    println!("wrote model.ckpt, history.csv{extra}, train-manifest.txt to {}", out.display());
    Ok(())
}

struct EvalRow {
    label: String,
    horizon: Option<usize>,
    norm: Metrics,
    raw: Option<Metrics>,
}

fn mean_metrics(ms: &[Metrics]) -> Metrics {
    let n = ms.len() as f64;
    Metrics {
        mse: ms.iter().map(|m| m.mse).sum::<f64>() / n,
        mae: ms.iter().map(|m| m.mae).sum::<f64>() / n,
        windows: ms.iter().map(|m| m.windows).sum(),
    }
}

fn load_checkpoint_for(path: &Path, raw: &TimeSeriesDataset) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    let want = ck.model.config.variates;
    if want != raw.variates() {
        return Err(Error::Config(format!(
            "variate mismatch: checkpoint {} has D={} but dataset has D={}",
            path.display(),
            want,
            raw.variates()
        )));
    }
    if ck.normalization.is_none() {
        return Err(Error::Data(format!("checkpoint {} has no normalization statistics", path.display())));
    }
    Ok(ck)
}

fn cmd_eval(c: EvalCmd) -> Outcome {
    let raw = load_raw(&c.data, c.run.seed)?;
    let ratios = c.data.ratios()?;
    let mut rows = Vec::new();
    for path in &c.checkpoint.0 {
        let ck = load_checkpoint_for(Path::new(path), &raw)?;
        let cfg = &ck.model.config;
        let ds = raw
            .clone()
            .chronological_split(ratios, cfg.lookback + cfg.horizon)?
            .standardize_with(ck.normalization.clone().expect("checked on load"))?;
        let (norm, rawm) = evaluate_full(&ck.model, &ck.store, &ds, c.split, c.denormalize)?;
        rows.push(EvalRow {
            label: path.clone(),
            horizon: Some(cfg.horizon),
            norm,
            raw: rawm,
        });
    }
    if rows.len() > 1 {
        let norm = mean_metrics(&rows.iter().map(|r| r.norm).collect::<Vec<_>>());
        let raw = if c.denormalize {
            Some(mean_metrics(&rows.iter().filter_map(|r| r.raw).collect::<Vec<_>>()))
        } else {
            None
        };
        rows.push(EvalRow {
            label: "Avg".into(),
            horizon: None,
            norm,
            raw,
        });
    }

    let out = out_dir(&c.run)?;
    let mut m = Manifest::default();
    m.put("checkpoint", &c.checkpoint);
    c.data.echo(&mut m);
    m.put("split", c.split.name());
    m.put("denormalize", c.denormalize);
    m.put("seed", c.run.seed);
    write_atomic(out.join("eval-manifest.txt"), m.render("eval").as_bytes())?;

    let mut csv = String::from("checkpoint,horizon,split,windows,mse,mae");
    if c.denormalize {
        csv.push_str(",raw_mse,raw_mae");
    }
    csv.push('\n');
    for r in &rows {
        let h = r.horizon.map(|h| h.to_string()).unwrap_or_default();
        let _ = write!(csv, "{},{},{},{},{},{}", r.label, h, c.split.name(), r.norm.windows, r.norm.mse, r.norm.mae);
        if let Some(rm) = r.raw {
            let _ = write!(csv, ",{},{}", rm.mse, rm.mae);
        }
        csv.push('\n');
    }
    write_atomic(out.join("metrics.csv"), csv.as_bytes())?;

    println!("{:<40}  {:>7}  {:>8}  {:>10}  {:>10}", "checkpoint", "horizon", "windows", "mse", "mae");
    for r in &rows {
        let h = r.horizon.map(|h| h.to_string()).unwrap_or_else(|| "-".into());
        print!("{:<40}  {:>7}  {:>8}  {:>10.6}  {:>10.6}", r.label, h, r.norm.windows, r.norm.mse, r.norm.mae);
        if let Some(rm) = r.raw {
            print!("  raw mse {:.6} mae {:.6}", rm.mse, rm.mae);
        }
        println!();
    }
    Ok(())
}

fn cmd_forecast(c: ForecastCmd) -> Outcome {
    let raw = load_raw(&c.data, c.run.seed)?;
    let ck = load_checkpoint_for(&c.checkpoint, &raw)?;
    let cfg = &ck.model.config;
    let (l, d, steps) = (cfg.lookback, cfg.variates, raw.timesteps());
    let origin = c.origin.0.unwrap_or(steps);
    if origin < l || origin > steps {
        return Err(Error::Config(format!("origin {origin} out of range: needs {l} <= origin <= {steps}")).into());
    }
    let norm = ck.normalization.clone().expect("checked on load");
    let names = raw.names().to_vec();
    let ds = raw.standardize_with(norm.clone())?;
    let x = Tensor::new(vec![1, l, d], ds.rows(origin - l..origin).to_vec())?;
    let y = ck.model.predict(&ck.store, &x)?;
    let values = norm.invert(y.data());

    let out = out_dir(&c.run)?;
    let mut m = Manifest::default();
    m.put("checkpoint", c.checkpoint.display());
    c.data.echo(&mut m);
    m.put("origin", origin);
    m.put("seed", c.run.seed);
    write_atomic(out.join("forecast-manifest.txt"), m.render("forecast").as_bytes())?;
    write_atomic(out.join("forecast.csv"), &csv_bytes(&names, &values)?)?;

    println!(
        "forecast of {} steps x {} variates from origin {} (input rows {}..{})",
        cfg.horizon,
        d,
        origin,
        origin - l,
        origin
    );
    println!("wrote forecast.csv to {}", out.display());
    Ok(())
}

fn cmd_synth(c: SynthCmd) -> Outcome {
    let spec = c.synth.spec(c.run.seed);
    let ds = synth_multiscale(&spec)?;
    let out = out_dir(&c.run)?;
    let target = out.join(&c.file);
    write_atomic(&target, &csv_bytes(ds.names(), ds.values())?)?;
    println!(
        "{} steps x {} variates, periods {}, noise {}",
        ds.timesteps(),
        ds.variates(),
        c.synth.synth_periods,
        spec.noise
    );
    println!("wrote {}", target.display());
    Ok(())
}

fn parse_op(name: &str) -> Result<OpKind> {
    Ok(match name.to_ascii_lowercase().as_str() {
        "matmul" => OpKind::MatMul,
        "add" => OpKind::Add,
        "sub" => OpKind::Sub,
        "mul" => OpKind::Mul,
        "exp" => OpKind::Exp,
        "softplus" => OpKind::Softplus,
        "silu" => OpKind::Silu,
        "relu" => OpKind::Relu,
        "scale" => OpKind::Scale,
        "sum" => OpKind::Sum,
        "mean" => OpKind::Mean,
        "reshape" => OpKind::Reshape,
        "transpose" => OpKind::Transpose,
        "reverse" => OpKind::Reverse,
        "narrow" => OpKind::Narrow,
        "select" => OpKind::Select,
        "mean_axis0" => OpKind::MeanAxis0,
        "layer_norm" => OpKind::LayerNorm,
        "rms_norm" => OpKind::RmsNorm,
        "selective_scan" => OpKind::Custom("selective_scan"),
        "causal_conv" => OpKind::Custom("causal_conv"),
        other => return Err(Error::Config(format!("unknown op kind {other:?}"))),
    })
}

fn uniform(shape: &[usize], seed: u64, purpose: &str) -> Result<Tensor> {
    let mut rng = rng_for(seed, purpose);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn cmd_gradcheck(c: GradcheckCmd) -> Outcome {
    if !(c.tol > 0.0) || c.batch == 0 {
        return Err(Error::Config("--tol must be positive and --batch at least 1".into()).into());
    }
    let kinds = c.strategies()?;
    let corrupt = c.corrupt_backward.as_deref().map(parse_op).transpose()?;
    let seed = c.run.seed;
    let out = out_dir(&c.run)?;
    let mut m = Manifest::default();
    c.echo(&mut m);
    write_atomic(out.join("gradcheck-manifest.txt"), m.render("gradcheck").as_bytes())?;

    let mut csv = String::from("strategy,param,numel,rel_error,max_coord_rel_error,max_abs_error,analytic_norm\n");
    let mut summary = Vec::new();
    for kind in kinds {
        let cfg = c.config(kind)?;
        let params = cost_report(&cfg)?.params;
        if params >= GRADCHECK_MAX_PARAMS {
            return Err(Error::Config(format!(
                "gradient check needs a tiny config: {params} parameters, limit {GRADCHECK_MAX_PARAMS}"
            ))
            .into());
        }
        let (model, store) = ForecastModel::new(cfg.clone(), seed)?;
        let x = uniform(&[c.batch, cfg.lookback, cfg.variates], seed, "gradcheck/input")?;
        let y = uniform(&[c.batch, cfg.horizon, cfg.variates], seed, "gradcheck/target")?;
        let mut checker = GradChecker::new(c.step);
        if let Some(op) = corrupt {
            checker = checker.with_corrupted_rule(op);
        }
        let started = Instant::now();
        let report = checker.run(&store, |g, p| {
            let yh = model.forward(g, p, &x)?;
            mse_loss(g, &yh, &y)
        })?;
        let secs = started.elapsed().as_secs_f64();
        println!("{} ({} params, {:.1}s)", kind.name(), params, secs);
        println!("  {:<36} {:>6}  {:>10}  {:>10}  {:>10}", "param", "numel", "rel", "coord_rel", "abs");
        for pc in &report.params {
            let _ = writeln!(
                csv,
                "{},{},{},{:e},{:e},{:e},{:e}",
                kind.name(),
                pc.name,
                pc.numel,
                pc.rel_error,
                pc.max_coord_rel_error,
                pc.max_abs_error,
                pc.analytic_norm
            );
            let flag = if pc.rel_error < c.tol { "" } else { "  over" };
            println!(
                "  {:<36} {:>6}  {:>10.3e}  {:>10.3e}  {:>10.3e}{flag}",
                pc.name, pc.numel, pc.rel_error, pc.max_coord_rel_error, pc.max_abs_error
            );
        }
        summary.push((kind.name(), report.max_rel_error));
    }
    write_atomic(out.join("gradcheck.csv"), csv.as_bytes())?;
    for (name, worst) in &summary {
        let verdict = if *worst < c.tol { "pass" } else { "FAIL" };
        println!("{name}: worst relative error {worst:.3e} -> {verdict}");
    }
    match summary.iter().copied().fold(None, |acc: Option<(&str, f64)>, s| match acc {
        Some(a) if a.1 >= s.1 => Some(a),
        _ => Some(s),
    }) {
        Some((name, worst)) if !(worst < c.tol) => Err(Failure::GradCheck {
            worst,
            tol: c.tol,
            strategy: name.to_string(),
        }),
        _ => Ok(()),
    }
}

fn cmd_profile(c: ProfileCmd) -> Outcome {
    let out = out_dir(&c.run)?;
    let mut header = String::from("L,T,variates,d_model,layers,scales,d_state,strategy,params,macs,memory_bytes,precision");
    if c.time_forward > 0 {
        header.push_str(",forward_ms");
    }
    let mut csv = header.clone() + "\n";
    println!("{}", header.replace(',', "  "));
    for &l in &c.lookback.0 {
        for &t in &c.horizon.0 {
            for &d in &c.variates.0 {
                for &de in &c.d_model.0 {
                    for &layers in &c.layers.0 {
                        for &n in &c.scales.0 {
                            for &ds in &c.d_state.0 {
                                let mut cfg = ModelConfig::new(l, t, d);
                                cfg.d_model = de;
                                cfg.layers = layers;
                                cfg.scales = n;
                                cfg.strategy = c.strategy.resolve(n, &Maybe(None), c.hidden)?;
                                cfg.d_state = ds;
                                cfg.conv_width = c.conv_width;
                                cfg.expand = c.expand;
                                cfg.ffn_hidden = c.ffn_hidden;
                                cfg.bidirectional = c.bidirectional;
                                let cost = cost_report(&cfg)?;
                                let mut row = format!(
                                    "{l},{t},{d},{de},{layers},{n},{ds},{},{},{},{},{}",
                                    c.strategy.name(),
                                    cost.params,
                                    cost.macs,
                                    cost.memory_bytes,
                                    cost.precision
                                );
                                if c.time_forward > 0 {
                                    let ms = time_forward(cfg, c.run.seed, c.warmup, c.time_forward)?;
                                    let _ = write!(row, ",{ms:.4}");
                                }
                                println!("{}", row.replace(',', "  "));
                                csv.push_str(&row);
                                csv.push('\n');
                            }
                        }
                    }
                }
            }
        }
    }
    write_atomic(out.join("profile.csv"), csv.as_bytes())?;
    println!("wrote profile.csv to {}", out.display());
    Ok(())
}

/// Mean milliseconds per batch-1 forward pass.
fn time_forward(cfg: ModelConfig, seed: u64, warmup: usize, reps: usize) -> Result<f64> {
    let x = uniform(&[1, cfg.lookback, cfg.variates], seed, "profile/input")?;
    let (model, store) = ForecastModel::new(cfg, seed)?;
    for _ in 0..warmup {
        model.predict(&store, &x)?;
    }
    let started = Instant::now();
    for _ in 0..reps {
        model.predict(&store, &x)?;
    }
    Ok(started.elapsed().as_secs_f64() * 1e3 / reps as f64)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

fn cmd_sweep(c: SweepCmd) -> Outcome {
    if c.model.alphas.0.is_some() {
        return Err(Error::Config("sweep-scales uses doubling alphas per scale count; drop --alphas".into()).into());
    }
    let data_seed = c.run.seed;
    let raw = load_raw(&c.data, data_seed)?;
    let first = c.model.config_with_scales(raw.variates(), c.ns.0[0])?;
    let ds = prepared(raw, &c.data, &first)?;
    let out = out_dir(&c.run)?;

    let mut m = Manifest::default();
    m.put("ns", &c.ns);
    m.put("seeds", &c.seeds);
    c.data.echo(&mut m);
    c.model.echo(&mut m, &first);
    m.set("scales", c.model.scales);
    m.set("alphas", "none");
    c.train.echo(&mut m);
    m.put("seed", data_seed);
    write_atomic(out.join("sweep-manifest.txt"), m.render("sweep-scales").as_bytes())?;

    let mut csv = String::from("n,seed,val_mse\n");
    println!("{:>3}  {:>8}  {:>12}", "n", "seed", "val_mse");
    let mut medians = Vec::new();
    for &n in &c.ns.0 {
        let mut vals = Vec::new();
        for &seed in &c.seeds.0 {
            let cfg = c.model.config_with_scales(ds.variates(), n)?;
            let tcfg = c.train.config(seed)?;
            let (model, mut store) = ForecastModel::new(cfg, seed)?;
            let val = train(&model, &mut store, &ds, &tcfg)?.best_val();
            let _ = writeln!(csv, "{n},{seed},{val}");
            println!("{n:>3}  {seed:>8}  {val:>12.6}");
            vals.push(val);
        }
        medians.push((n, median(&mut vals)));
    }
    for (n, med) in &medians {
        let _ = writeln!(csv, "{n},median,{med}");
        println!("{n:>3}  {:>8}  {med:>12.6}", "median");
    }
    write_atomic(out.join("sweep.csv"), csv.as_bytes())?;
    println!("wrote sweep.csv to {}", out.display());
    Ok(())
}
