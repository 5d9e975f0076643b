//! The `mhfa` command line. [`run`] parses arguments, executes one
//! subcommand and returns the process exit status.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::dataset::{build_dataset, load_dataset, read_trials, resolve_trials, root_of, write_dataset};
use crate::error::{Error, Result};
use crate::gradsuite::{run_suite, SuiteSettings, TOLERANCE};
use crate::model::Model;
use crate::pooling::layer_weight_report;
use crate::trainer::{evaluate, sweep, sweep_csv, train, EmbeddingCache, SweepAxis};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_DIVERGENCE: i32 = 5;
pub const EXIT_GRADCHECK: i32 = 6;

#[derive(Debug, Parser)]
#[command(name = "mhfa", version, about = "Layer-attentive speaker embeddings on a toy encoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with train/eval lists and trials.
    Gen(GenArgs),
    /// Pre-train, fine-tune and evaluate; writes a checkpoint and run record.
    Train(TrainArgs),
    /// Score a trial list with a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable component.
    Gradcheck(GradcheckArgs),
    /// Train once per value of one configuration axis.
    Sweep(SweepArgs),
    /// Export the normalised layer weights of a checkpoint.
    Weights(WeightsArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `synth.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    trials: PathBuf,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    axis: String,
    /// Comma-separated values.
    #[arg(long, default_value = "", allow_hyphen_values = true)]
    values: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Args)]
struct WeightsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// CSV path.
    #[arg(long)]
    out: PathBuf,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Unsupported(_) => EXIT_USAGE,
        Error::Config(_) | Error::Label { .. } => EXIT_CONFIG,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        _ => EXIT_OTHER,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let res = match cli.cmd {
        Command::Gen(a) => cmd_gen(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Weights(a) => cmd_weights(a, out),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn say(out: &mut dyn Write, line: std::fmt::Arguments) {
    let _ = writeln!(out, "{line}");
}

fn cmd_gen(a: GenArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    cfg.synth.validate()?;
    let data = build_dataset(&cfg.synth, &cfg.gen)?;
    write_dataset(&a.out, &cfg.synth, &cfg.gen, &data)?;
    let n_target = data.trials.iter().filter(|t| t.is_target).count();
    say(
        out,
        format_args!(
            "{} speakers ({} train, {} eval), {} train and {} eval utterances, {} trials ({} target, {} non-target) -> {}",
            cfg.synth.n_speakers,
            cfg.gen.train_speakers,
            cfg.synth.n_speakers - cfg.gen.train_speakers,
            data.train.len(),
            data.eval.len(),
            data.trials.len(),
            n_target,
            data.trials.len() - n_target,
            a.out.display()
        ),
    );
    Ok(EXIT_OK)
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate(&cfg.encoder)?;
    let data = load_dataset(&a.data)?;
    let res = train(&cfg.encoder, &cfg.train, &data, a.threads)?;
    let rec = &res.record;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    res.model.save(&a.out.join("checkpoint"), &res.optim)?;
    write(&a.out.join("config.toml"), &cfg.to_toml())?;
    write(&a.out.join("run.json"), &rec.to_json())?;
    write(&a.out.join("drift.csv"), &rec.drift_csv())?;
    write(
        &a.out.join("timing.json"),
        &format!("{{\n  \"elapsed_secs\": {}\n}}\n", rec.elapsed_secs),
    )?;
    for (e, l) in rec.epoch_loss.iter().enumerate() {
        say(out, format_args!("epoch {} loss {l:.6} drift {:.6e}", e + 1, rec.drift[e + 1].iter().sum::<f64>()));
    }
    if let Some(m) = &rec.metrics {
        m.write(&a.out.join("metrics.json"))?;
        say(
            out,
            format_args!("eer {:.6} dcf1 {:.6} dcf5 {:.6}", m.eer, m.dcf1, m.dcf5),
        );
    }
    say(out, format_args!("checkpoint {} -> {}", rec.checkpoint_hash, a.out.display()));
    Ok(EXIT_OK)
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let (model, _) = Model::load(&a.checkpoint)?;
    let lines = read_trials(&a.trials)?;
    let (samples, trials) = resolve_trials(&root_of(&a.trials), &lines)?;
    let mut cache = EmbeddingCache::new();
    let (report, _) = evaluate(&model, &samples, &trials, &mut cache, a.threads)?;
    report.write(&a.out)?;
    say(
        out,
        format_args!(
            "eer {:.6} dcf1 {:.6} dcf5 {:.6} over {} trials ({} target, {} non-target)",
            report.eer,
            report.dcf1,
            report.dcf5,
            trials.len(),
            report.n_target,
            report.n_nontarget
        ),
    );
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(a.config.as_deref())?;
    cfg.train.aam.validate()?;
    let settings = SuiteSettings {
        margin: cfg.train.aam.margin,
        scale: cfg.train.aam.scale,
        constraint: cfg.train.backend.constraint,
        seed: a.seed.unwrap_or(0),
        fault: a.inject_fault,
        ..SuiteSettings::default()
    };
    let mut ok = true;
    for (c, e) in run_suite(&settings) {
        let pass = e < TOLERANCE;
        ok &= pass;
        say(
            out,
            format_args!("{c:<12} max_rel_err {e:.3e} {}", if pass { "ok" } else { "FAIL" }),
        );
    }
    Ok(if ok { EXIT_OK } else { EXIT_GRADCHECK })
}

fn cmd_sweep(a: SweepArgs, out: &mut dyn Write) -> Result<i32> {
    let axis: SweepAxis = a.axis.parse()?;
    let values: Vec<String> = a
        .values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect();
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate(&cfg.encoder)?;
    crate::trainer::sweep_values(axis, &values)?;
    let data = if values.is_empty() {
        None
    } else {
        Some(load_dataset(&a.data)?)
    };
    let rows = match &data {
        Some(d) => sweep(&cfg.encoder, &cfg.train, axis, &values, d, a.threads)?,
        None => Vec::new(),
    };
    let csv = sweep_csv(axis, &rows);
    write(&a.out.join(format!("sweep_{axis}.csv")), &csv)?;
    for r in &rows {
        if let Some(rec) = &r.record {
            write(&a.out.join(format!("run_{axis}_{}.json", r.value)), &rec.to_json())?;
        }
    }
    let _ = out.write_all(csv.as_bytes());
    Ok(EXIT_OK)
}

fn cmd_weights(a: WeightsArgs, out: &mut dyn Write) -> Result<i32> {
    let (model, _) = Model::load(&a.checkpoint)?;
    let w = layer_weight_report(&model.store, &model.backend)?;
    let mut csv = String::new();
    match &w.key {
        Some(k) => {
            csv.push_str("layer,key_weight,value_weight\n");
            for (l, (kw, vw)) in k.iter().zip(&w.value).enumerate() {
                csv.push_str(&format!("{l},{kw},{vw}\n"));
            }
        }
        None => {
            csv.push_str("layer,value_weight\n");
            for (l, vw) in w.value.iter().enumerate() {
                csv.push_str(&format!("{l},{vw}\n"));
            }
        }
    }
    write(&a.out, &csv)?;
    let _ = out.write_all(csv.as_bytes());
    Ok(EXIT_OK)
}
