use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use seng::curvature::Routing;
use seng::direction::SketchConfig;
use seng::distributed::SyncMode;
use seng::harness::{
    contraction_fraction, oracle_error_sweep, run_ntk_experiment, run_training, setup_ntk, summarize_sweep,
    write_sweep_csv, DatasetSource, NtkConfig, NtkCurvature, OptimizerKind, RunConfig, SweepConfig, SyntheticSpec,
};
use seng::optimizer::{DampingSchedule, LrSchedule};
use seng::sketch::SketchKind;

#[derive(Parser, Debug)]
#[command(name = "seng", version, about = "Train small networks with the SENG optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// TOML file whose keys mirror the long flags; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sketched-coefficient error sweep against the exact solve.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Optim {
    Seng,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum DataKind {
    Synthetic,
    Ntk,
    Idx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Schedule {
    Constant,
    Cosine,
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Sketch {
    Uniform,
    Leverage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Curvature {
    Jacobian,
    Efim,
}

impl From<Sketch> for SketchKind {
    fn from(s: Sketch) -> Self {
        match s {
            Sketch::Uniform => SketchKind::Uniform,
            Sketch::Leverage => SketchKind::Leverage,
        }
    }
}

/// Every field is optional so a config file and the command line can be
/// layered; unset values fall back to library defaults.
#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct Opts {
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    optimizer: Option<Optim>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    dataset: Option<DataKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    idx_images: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    idx_labels: Option<PathBuf>,
    /// Held-out tail of an IDX dataset.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    test_fraction: Option<f64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    epochs: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_steps: Option<u64>,
    /// Initial step size (0.1 for sgd when unset).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr_schedule: Option<Schedule>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    decay_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    warmup_epochs: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    warmup_start: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    damping: Option<f64>,
    /// Multiply the damping by this every `--damping-period` epochs.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    damping_factor: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    damping_period: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    momentum: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_decay: Option<f64>,
    /// Curvature refresh period T.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    update_freq: Option<u64>,
    /// Layers with fewer parameters keep U explicitly.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<usize>,
    /// Route by storage footprint instead of the threshold.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    footprint_routing: Option<bool>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sketch: Option<Sketch>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sketch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sketch_g: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    sketch_a: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rank: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    workers: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    stale_coeffs: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    ntk_curvature: Option<Curvature>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    ntk_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, default_value_t = 16)]
    n_g: usize,
    #[arg(long, default_value_t = 32)]
    n_a: usize,
    #[arg(long, default_value_t = 16)]
    rho: usize,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256, 512])]
    qs: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "uniform")]
    sketch: Sketch,
    /// Sample rows with replacement.
    #[arg(long)]
    replacement: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn layered(cli: Opts, file: Option<&Path>) -> Result<Opts> {
    let Some(path) = file else { return Ok(cli) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file_opts: Opts = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mut merged = serde_json::to_value(file_opts)?;
    if let (Value::Object(base), Value::Object(over)) = (&mut merged, serde_json::to_value(cli)?) {
        base.extend(over);
    }
    Ok(serde_json::from_value(merged)?)
}

fn sketch_config(o: &Opts, base: SketchConfig) -> SketchConfig {
    SketchConfig {
        kind: o.sketch.map_or(base.kind, Into::into),
        q: o.sketch_size.or(base.q),
        zeta_g: o.sketch_g.or(base.zeta_g),
        zeta_a: o.sketch_a.or(base.zeta_a),
        ..base
    }
}

fn run_config(o: &Opts) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let t = &mut cfg.train;
    cfg.optimizer = match o.optimizer.unwrap_or(Optim::Seng) {
        Optim::Seng => OptimizerKind::Seng,
        Optim::Sgd => OptimizerKind::Sgd,
    };
    t.lr = o.lr.unwrap_or(match cfg.optimizer {
        OptimizerKind::Seng => t.lr,
        OptimizerKind::Sgd => 0.1,
    });
    t.lr_schedule = match o.lr_schedule.unwrap_or(Schedule::Constant) {
        Schedule::Constant => LrSchedule::Constant,
        Schedule::Cosine => LrSchedule::Cosine,
        Schedule::Exp => LrSchedule::Exp {
            decay: o.decay_rate.unwrap_or(6.0),
        },
    };
    if o.decay_rate.is_some() && o.lr_schedule != Some(Schedule::Exp) {
        bail!("--decay-rate only applies to --lr-schedule exp");
    }
    t.warmup_epochs = o.warmup_epochs.unwrap_or(t.warmup_epochs);
    t.warmup_start = o.warmup_start.unwrap_or(t.warmup_start);
    let lambda = o.damping.unwrap_or(match t.damping {
        DampingSchedule::Constant { value } => value,
        DampingSchedule::ExpDecay { base, .. } => base,
    });
    t.damping = match (o.damping_factor, o.damping_period) {
        (None, None) => DampingSchedule::Constant { value: lambda },
        (factor, period) => DampingSchedule::ExpDecay {
            base: lambda,
            factor: factor.unwrap_or(0.5),
            period: period.unwrap_or(1.0),
        },
    };
    t.momentum = o.momentum.unwrap_or(t.momentum);
    t.weight_decay = o.weight_decay.unwrap_or(t.weight_decay);
    t.batch_size = o.batch_size.unwrap_or(t.batch_size);
    t.max_epoch = o.epochs.unwrap_or(t.max_epoch);
    t.seed = o.seed.unwrap_or(t.seed);
    t.refresh.period = o.update_freq.unwrap_or(t.refresh.period);
    t.refresh.rank = o.rank.unwrap_or(t.refresh.rank);
    t.refresh.routing = match (o.footprint_routing.unwrap_or(false), o.threshold) {
        (true, Some(_)) => bail!("--threshold and --footprint-routing are exclusive"),
        (true, None) => Routing::Footprint,
        (false, Some(v)) => Routing::Threshold(v),
        (false, None) => t.refresh.routing,
    };
    t.sketch = sketch_config(o, t.sketch);

    cfg.data = match o.dataset.unwrap_or(DataKind::Synthetic) {
        DataKind::Synthetic => DatasetSource::Synthetic(SyntheticSpec::default()),
        DataKind::Idx => DatasetSource::Idx {
            images: o.idx_images.clone().context("--dataset idx needs --idx-images")?,
            labels: o.idx_labels.clone().context("--dataset idx needs --idx-labels")?,
            test_fraction: o.test_fraction.unwrap_or(0.2),
        },
        DataKind::Ntk => unreachable!("handled by the ntk runner"),
    };
    if let Some(h) = &o.hidden {
        cfg.hidden = h.clone();
    }
    cfg.workers = o.workers.unwrap_or(1);
    cfg.sync = if o.stale_coeffs.unwrap_or(false) {
        SyncMode::Stale
    } else {
        SyncMode::Fresh
    };
    cfg.max_steps = o.max_steps;
    Ok(cfg)
}

fn out_dir(o: &Opts) -> Result<Option<&Path>> {
    if let Some(dir) = &o.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(o.out.as_deref())
}

fn train(o: &Opts) -> Result<Value> {
    let cfg = run_config(o)?;
    let s = run_training(&cfg, out_dir(o)?)?;
    Ok(json!({
        "steps": s.steps,
        "final_loss": s.final_loss,
        "final_grad_norm": s.final_grad_norm,
        "final_test_acc": s.final_test_acc,
    }))
}

fn ntk(o: &Opts) -> Result<Value> {
    let base = NtkConfig::default();
    let seed = o.seed.unwrap_or(0);
    let cfg = NtkConfig {
        alpha: o.lr.unwrap_or(base.alpha),
        damping: o.damping.unwrap_or(base.damping),
        steps: o.ntk_steps.unwrap_or(base.steps),
        sketch: sketch_config(o, base.sketch),
        curvature: match o.ntk_curvature.unwrap_or(Curvature::Jacobian) {
            Curvature::Jacobian => NtkCurvature::Jacobian,
            Curvature::Efim => NtkCurvature::Efim,
        },
        seed,
    };
    let mut problem = setup_ntk(20, 8, 2048, 1.0, seed)?;
    let run = run_ntk_experiment(&mut problem, &cfg)?;
    if let Some(dir) = out_dir(o)? {
        let mut w = csv::Writer::from_path(dir.join("ntk.csv"))?;
        w.write_record(["step", "residual"])?;
        for (k, r) in run.residuals.iter().enumerate() {
            w.write_record([k.to_string(), r.to_string()])?;
        }
        w.flush()?;
    }
    let first = run.residuals[0];
    let last = *run.residuals.last().unwrap_or(&first);
    Ok(json!({
        "steps": cfg.steps,
        "initial_residual": first,
        "final_residual": last,
        "lambda_min_g0": run.lambda_min_g0,
        "contraction_fraction": contraction_fraction(&run.residuals, 0.9),
    }))
}

fn sweep(a: &SweepArgs) -> Result<Value> {
    let cfg = SweepConfig {
        n_g: a.n_g,
        n_a: a.n_a,
        rho: a.rho,
        lambda: a.lambda,
        qs: a.qs.clone(),
        seeds: a.seeds,
        seed: a.seed,
        kind: a.sketch.into(),
        replacement: a.replacement,
        zero_gradient: false,
    };
    let rows = oracle_error_sweep(&cfg)?;
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        write_sweep_csv(&rows, fs::File::create(dir.join("sweep.csv"))?)?;
    }
    let summary: Vec<Value> = summarize_sweep(&rows)
        .iter()
        .map(|s| {
            json!({
                "q": s.q,
                "median_d_err": s.median_d_err,
                "median_b_err": s.median_b_err,
                "median_eta": s.median_eta,
                "violations": s.violations,
            })
        })
        .collect();
    Ok(json!({ "rows": rows.len(), "summary": summary }))
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Some(Command::Sweep(a)) => sweep(&a),
        None => {
            let opts = layered(cli.opts, cli.config.as_deref())?;
            match opts.dataset {
                Some(DataKind::Ntk) => ntk(&opts),
                _ => train(&opts),
            }
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    let line = json!({ "error": kind, "message": message });
    let _ = writeln!(std::io::stderr(), "{line}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or_default();
            return fail("usage", first.trim_start_matches("error: ").to_string());
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail("run", format!("{e:#}")),
    }
}
