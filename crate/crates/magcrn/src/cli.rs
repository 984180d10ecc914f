//! Command-line surface: synth | train | eval | ablate | gradcheck | params.
//!
//! Every command is reproducible from its flags plus one run seed; the
//! effective configuration is echoed into the output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::config::{ModelConfig, RunConfig, Variant};
use crate::data::{self, ForecastWindow, Manifest, RawSeries, Scaler, SynthSpec};
use crate::model;
use crate::params;
use crate::trainer::{self, TrainSettings};

#[derive(Parser)]
#[command(
    name = "magcrn",
    about = "Meta-attentive graph convolutional recurrent network for multi-step traffic forecasting",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic node-heterogeneous series file.
    Synth(SynthArgs),
    /// Train a model; writes checkpoint, history log, and config echo.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split; optionally compare checkpoints.
    Eval(EvalArgs),
    /// Train and evaluate the full model and all four ablation variants.
    Ablate(AblateArgs),
    /// Check reverse-mode gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Report parameter counts for a configuration.
    Params(ParamsArgs),
}

pub fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Train(args) => cmd_train(&args).map(|_| ()),
        Command::Eval(args) => cmd_eval(&args),
        Command::Ablate(args) => cmd_ablate(&args),
        Command::Gradcheck(args) => cmd_gradcheck(&args),
        Command::Params(args) => cmd_params(&args),
    }
}

// ── synth ──────────────────────────────────────────────────────────────

#[derive(Args)]
struct SynthArgs {
    /// Number of graph nodes.
    #[arg(long)]
    nodes: usize,
    /// Number of time steps.
    #[arg(long)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output series file.
    #[arg(long)]
    out: PathBuf,
    /// Also write a manifest pointing at the series file.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Gaussian noise standard deviation in value units.
    #[arg(long, default_value_t = 5.0)]
    noise: f64,
    /// Neighbor coupling strength.
    #[arg(long, default_value_t = 0.1)]
    coupling: f64,
    /// 1 = daily harmonic only, 2 = adds a half-day harmonic.
    #[arg(long, default_value_t = 2)]
    harmonics: u8,
    /// Maximum linear drift over the whole series, in value units.
    #[arg(long, default_value_t = 20.0)]
    trend: f64,
}

fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    if args.nodes == 0 || args.steps == 0 {
        bail!("--nodes and --steps must be at least 1");
    }
    let spec = SynthSpec {
        nodes: args.nodes,
        steps: args.steps,
        seed: args.seed,
        noise: args.noise,
        coupling: args.coupling,
        harmonics: args.harmonics,
        trend: args.trend,
    };
    let series = data::synth_generate(&spec)?;
    data::save_series(&args.out, &series)
        .with_context(|| format!("writing {}", args.out.display()))?;
    if let Some(mpath) = &args.manifest {
        data::save_manifest(
            mpath,
            &Manifest {
                path: args.out.clone(),
                kind: series.kind,
                interval_minutes: series.interval_minutes,
            },
        )?;
    }
    println!(
        "wrote {} steps x {} nodes (seed {}) to {}",
        args.steps,
        args.nodes,
        args.seed,
        args.out.display()
    );
    Ok(())
}

// ── shared config plumbing ─────────────────────────────────────────────

/// Flags that override config-file values. Unset flags keep whatever the
/// config file (or the protocol defaults) provide.
#[derive(Args, Clone, Default)]
struct ConfigFlags {
    /// Plain key=value config file applied before any flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    t_in: Option<usize>,
    #[arg(long)]
    t_out: Option<usize>,
    #[arg(long)]
    filter_len: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    attn_layers: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    nmpl_gate: Option<String>,
    #[arg(long)]
    self_loops: Option<bool>,
    #[arg(long)]
    output_proj: Option<bool>,
    #[arg(long)]
    per_horizon_heads: Option<bool>,
    #[arg(long)]
    gru_depth: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    train_ratio: Option<f64>,
    #[arg(long)]
    val_ratio: Option<f64>,
    #[arg(long)]
    per_node_scaling: Option<bool>,
    #[arg(long)]
    clip_norm: Option<f64>,
}

impl ConfigFlags {
    fn overrides(&self) -> Vec<(&'static str, String)> {
        let mut kv: Vec<(&'static str, String)> = Vec::new();
        let mut push = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k, v));
            }
        };
        push(
            "manifest",
            self.manifest.as_ref().map(|p| p.display().to_string()),
        );
        push("variant", self.variant.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("embed_dim", self.embed_dim.map(|v| v.to_string()));
        push("hidden_dim", self.hidden_dim.map(|v| v.to_string()));
        push("t_in", self.t_in.map(|v| v.to_string()));
        push("t_out", self.t_out.map(|v| v.to_string()));
        push("filter_len", self.filter_len.map(|v| v.to_string()));
        push("heads", self.heads.map(|v| v.to_string()));
        push("attn_layers", self.attn_layers.map(|v| v.to_string()));
        push("ffn_dim", self.ffn_dim.map(|v| v.to_string()));
        push("norm", self.norm.clone());
        push("nmpl_gate", self.nmpl_gate.clone());
        push("self_loops", self.self_loops.map(|v| v.to_string()));
        push("output_proj", self.output_proj.map(|v| v.to_string()));
        push(
            "per_horizon_heads",
            self.per_horizon_heads.map(|v| v.to_string()),
        );
        push("gru_depth", self.gru_depth.map(|v| v.to_string()));
        push("batch_size", self.batch_size.map(|v| v.to_string()));
        push("learning_rate", self.learning_rate.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("patience", self.patience.map(|v| v.to_string()));
        push("train_ratio", self.train_ratio.map(|v| v.to_string()));
        push("val_ratio", self.val_ratio.map(|v| v.to_string()));
        push(
            "per_node_scaling",
            self.per_node_scaling.map(|v| v.to_string()),
        );
        push("clip_norm", self.clip_norm.map(|v| v.to_string()));
        kv
    }

    /// Config file first, then flag overrides; every violation reported.
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                RunConfig::from_kv(&text)?
            }
            None => RunConfig::protocol(1),
        };
        let mut errors = Vec::new();
        for (key, value) in self.overrides() {
            if let Err(e) = cfg.apply_kv(key, &value) {
                errors.push(e);
            }
        }
        if !errors.is_empty() {
            bail!(crate::error::Error::Config(errors));
        }
        Ok(cfg)
    }
}

/// Everything a training or evaluation run needs from one dataset.
struct PreparedData {
    scaler: Scaler,
    train: Vec<ForecastWindow>,
    val: Vec<ForecastWindow>,
    test: Vec<ForecastWindow>,
}

fn prepare_data(run: &RunConfig, raw: &RawSeries) -> anyhow::Result<PreparedData> {
    let repaired = data::interpolate_missing(raw)?;
    let span = run.model.t_in + run.model.t_out;
    let (train, val, test) = data::split(&repaired, run.train_ratio, run.val_ratio, span)?;
    let scaler = Scaler::fit(&train.values, run.per_node_scaling)?;
    Ok(PreparedData {
        train: data::windows(&train, &scaler, run.model.t_in, run.model.t_out),
        val: data::windows(&val, &scaler, run.model.t_in, run.model.t_out),
        test: data::windows(&test, &scaler, run.model.t_in, run.model.t_out),
        scaler,
    })
}

fn load_run_series(run: &RunConfig) -> anyhow::Result<RawSeries> {
    let manifest = run
        .manifest
        .as_ref()
        .ok_or_else(|| anyhow!("no dataset: pass --manifest or set it in the config file"))?;
    Ok(data::load_from_manifest(Path::new(manifest))?)
}

/// Writes every line to stdout and to the log file.
struct TeeLog {
    file: fs::File,
}

impl Write for TeeLog {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stdout().write_all(buf)?;
        self.file.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stdout().flush()?;
        self.file.flush()
    }
}

// ── train ──────────────────────────────────────────────────────────────

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Output directory for checkpoint, history and config echo.
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<PathBuf> {
    let mut run = args.flags.resolve()?;
    let raw = load_run_series(&run)?;
    run.model.nodes = raw.nodes();
    run.validate()?;

    fs::create_dir_all(&args.out_dir)?;
    fs::write(args.out_dir.join("run.config"), run.to_kv())?;

    let prepared = prepare_data(&run, &raw)?;
    let settings = TrainSettings {
        batch_size: run.batch_size,
        learning_rate: run.learning_rate,
        max_epochs: run.epochs,
        patience: run.patience,
        clip_norm: run.clip_norm,
        stop_at_train_loss: None,
    };
    let mut log = TeeLog {
        file: fs::File::create(args.out_dir.join("history.log"))?,
    };
    let (state, history) = trainer::train(
        &run.model,
        &settings,
        &prepared.train,
        &prepared.val,
        &prepared.scaler,
        Some(&mut log),
    )?;

    let ckpt = args.out_dir.join("checkpoint.ckpt");
    params::save_checkpoint(&ckpt, &run, &state)?;
    println!(
        "best epoch {} (val MAE {:.6}); checkpoint: {}",
        history.best_epoch,
        history.best_val_mae,
        ckpt.display()
    );
    Ok(ckpt)
}

// ── eval ───────────────────────────────────────────────────────────────

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest override; defaults to the one echoed in the checkpoint.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Which split to evaluate: train | val | test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Emit one metrics row per horizon.
    #[arg(long)]
    per_horizon: bool,
    /// Second checkpoint; reports win-point counts of the first vs this one.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    batch_size: Option<usize>,
}

fn pick_split<'a>(prepared: &'a PreparedData, split: &str) -> anyhow::Result<&'a [ForecastWindow]> {
    match split {
        "train" => Ok(&prepared.train),
        "val" => Ok(&prepared.val),
        "test" => Ok(&prepared.test),
        other => bail!("unknown split `{other}` (expected train|val|test)"),
    }
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let (mut run, state) = params::load_checkpoint(&args.checkpoint)?;
    if let Some(m) = &args.manifest {
        run.manifest = Some(m.display().to_string());
    }
    let raw = load_run_series(&run)?;
    if raw.nodes() != run.model.nodes {
        bail!(
            "checkpoint expects {} nodes but the series has {}",
            run.model.nodes,
            raw.nodes()
        );
    }
    let prepared = prepare_data(&run, &raw)?;
    let windows = pick_split(&prepared, &args.split)?;
    if windows.is_empty() {
        bail!("split `{}` has no windows", args.split);
    }
    let batch = args.batch_size.unwrap_or(run.batch_size);
    let report = trainer::evaluate(&run.model, &state, windows, &prepared.scaler, batch)?;
    if report.identity_stats_used {
        eprintln!("warning: normalization statistics were never trained; used identity statistics");
    }
    println!("split={} samples={}", args.split, report.samples);
    if args.per_horizon {
        print!("{}", report.to_text());
    } else {
        let m = &report.average;
        let mape = m.mape.map_or("na".to_string(), |v| format!("{v:.9}"));
        println!(
            "horizon=avg mae={:.9} rmse={:.9} mape={mape}",
            m.mae, m.rmse
        );
    }

    if let Some(other) = &args.compare {
        let (run_b, state_b) = params::load_checkpoint(other)?;
        if run_b.model.nodes != run.model.nodes
            || run_b.model.t_out != run.model.t_out
            || run_b.model.t_in != run.model.t_in
        {
            bail!("compare checkpoint has incompatible input/output dimensions");
        }
        let (pred_a, truth, _) =
            trainer::predictions_over(&run.model, &state, windows, &prepared.scaler, batch)?;
        let (pred_b, _, _) =
            trainer::predictions_over(&run_b.model, &state_b, windows, &prepared.scaler, batch)?;
        let wp = trainer::win_point(&pred_a, &pred_b, &truth);
        println!(
            "win_point a={} b={} ties={} win_pct={:.3}",
            wp.wins_a,
            wp.wins_b,
            wp.ties,
            wp.win_percentage()
        );
    }
    Ok(())
}

// ── ablate ─────────────────────────────────────────────────────────────

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_ablate(args: &AblateArgs) -> anyhow::Result<()> {
    let base = args.flags.resolve()?;
    let raw = load_run_series(&base)?;
    fs::create_dir_all(&args.out_dir)?;

    struct Row {
        variant: Variant,
        val_mae: f64,
        test: trainer::MetricsReport,
    }
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let mut run = base.clone();
        run.model.nodes = raw.nodes();
        run.model.variant = variant;
        run.validate()?;
        let prepared = prepare_data(&run, &raw)?;
        let settings = TrainSettings {
            batch_size: run.batch_size,
            learning_rate: run.learning_rate,
            max_epochs: run.epochs,
            patience: run.patience,
            clip_norm: run.clip_norm,
            stop_at_train_loss: None,
        };
        let dir = args.out_dir.join(variant.as_str());
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("run.config"), run.to_kv())?;
        let mut log = TeeLog {
            file: fs::File::create(dir.join("history.log"))?,
        };
        eprintln!("== training variant {variant} ==");
        let (state, history) = trainer::train(
            &run.model,
            &settings,
            &prepared.train,
            &prepared.val,
            &prepared.scaler,
            Some(&mut log),
        )?;
        params::save_checkpoint(&dir.join("checkpoint.ckpt"), &run, &state)?;
        let test = trainer::evaluate(
            &run.model,
            &state,
            &prepared.test,
            &prepared.scaler,
            run.batch_size,
        )?;
        rows.push(Row {
            variant,
            val_mae: history.best_val_mae,
            test,
        });
    }

    let mut report = String::new();
    report.push_str(&format!("{:<10}", "metric"));
    for row in &rows {
        report.push_str(&format!(" {:>12}", row.variant.as_str()));
    }
    report.push('\n');
    let fmt = |v: f64| format!(" {v:>12.4}");
    report.push_str(&format!("{:<10}", "val_mae"));
    for row in &rows {
        report.push_str(&fmt(row.val_mae));
    }
    report.push('\n');
    for (label, pick) in [("mae", 0usize), ("rmse", 1), ("mape", 2)] {
        report.push_str(&format!("{:<10}", format!("test_{label}")));
        for row in &rows {
            let m = &row.test.average;
            let v = match pick {
                0 => Some(m.mae),
                1 => Some(m.rmse),
                _ => m.mape,
            };
            match v {
                Some(v) => report.push_str(&fmt(v)),
                None => report.push_str(&format!(" {:>12}", "na")),
            }
        }
        report.push('\n');
    }
    print!("{report}");
    fs::write(args.out_dir.join("ablation.txt"), &report)?;
    Ok(())
}

// ── gradcheck ──────────────────────────────────────────────────────────

#[derive(Args)]
struct GradcheckArgs {
    /// Variant to check (default full).
    #[arg(long, default_value = "full")]
    variant: String,
    /// Corrupt one reverse-mode gradient entry; the table must then fail.
    #[arg(long)]
    inject_fault: bool,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn cmd_gradcheck(args: &GradcheckArgs) -> anyhow::Result<()> {
    let mut config = ModelConfig::tiny();
    config.variant = Variant::parse(&args.variant)?;
    config.seed = args.seed;
    let rows = model::grad_check(
        &config,
        args.batch,
        args.step,
        args.tolerance,
        args.inject_fault,
    )?;
    let mut all_pass = true;
    println!("{:<28} {:>14} {:>6}", "tensor", "max_rel_err", "check");
    for row in &rows {
        all_pass &= row.pass;
        println!(
            "{:<28} {:>14.3e} {:>6}",
            row.name,
            row.max_rel_err,
            if row.pass { "PASS" } else { "FAIL" }
        );
    }
    if !all_pass {
        bail!("gradient check failed");
    }
    Ok(())
}

// ── params ─────────────────────────────────────────────────────────────

#[derive(Args)]
struct ParamsArgs {
    #[arg(long, default_value_t = 307)]
    nodes: usize,
    /// Variant whose per-module breakdown to print.
    #[arg(long, default_value = "full")]
    variant: String,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    filter_len: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    attn_layers: Option<usize>,
}

fn cmd_params(args: &ParamsArgs) -> anyhow::Result<()> {
    let mut config = ModelConfig::protocol(args.nodes);
    if let Some(v) = args.embed_dim {
        config.embed_dim = v;
    }
    if let Some(v) = args.hidden_dim {
        config.hidden_dim = v;
    }
    if let Some(v) = args.filter_len {
        config.filter_len = v;
    }
    if let Some(v) = args.heads {
        config.heads = v;
    }
    if let Some(v) = args.attn_layers {
        config.attn_layers = v;
    }

    println!("{:<10} {:>12}", "variant", "params");
    for variant in Variant::ALL {
        let mut c = config.clone();
        c.variant = variant;
        println!("{:<10} {:>12}", variant.as_str(), model::count_params(&c)?);
    }

    let mut c = config.clone();
    c.variant = Variant::parse(&args.variant)?;
    let state = params::init(&c)?;
    println!("\nbreakdown ({}):", c.variant);
    let breakdown = state.params.breakdown();
    let mut sum = 0usize;
    for (group, count) in &breakdown {
        println!("  {:<12} {:>12}", group, count);
        sum += count;
    }
    println!("  {:<12} {:>12}", "total", sum);
    debug_assert_eq!(sum, state.params.count_params());
    Ok(())
}
