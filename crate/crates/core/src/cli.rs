//! The `spikefirst` command line: train, eval, tune, noise and report.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 data error, 4 checkpoint error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::data::{data_root_from_env, load_cifar10, load_mnist, Dataset, DatasetName, Split};
use crate::error::Error;
use crate::metrics::{evaluate, noise_csv, noise_sweep, write_text, EvalOptions, MetricsReport, REPORT_HEADER};
use crate::network::{Coding, KvMap};
use crate::trainer::{
    base_preset, load_checkpoint, save_checkpoint, train_from, Checkpoint, TrainConfig, TrainOptions,
};
use crate::tuner::{tune_checkpoint, DeConfig, TuneOptions, DEFAULT_BOUNDS, DEFAULT_VALIDATION};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "spikefirst",
    version,
    about = "Train and analyse first-to-spike spiking networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network from a preset and/or a key=value config file.
    Train(TrainArgs),
    /// Accuracy, latency, spiking rates and energy cost of a checkpoint.
    Eval(EvalArgs),
    /// Tune per-layer thresholds (or scales) with differential evolution.
    Tune(TuneArgs),
    /// Test accuracy under additive Gaussian input noise.
    Noise(NoiseArgs),
    /// One comparison table over several checkpoints.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Dataset directory (defaults to $SPIKEFIRST_DATA).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs/out")]
    pub out: PathBuf,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Preset such as mnist-sf-bptt.
    #[arg(long)]
    pub preset: Option<String>,
    /// Flat key = value config file applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Continue from `<out>/last.ckpt` when it exists.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// first-to-spike or rate; defaults to the network's coding.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate on the first N test images.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub beta: f64,
    #[arg(long, default_value_t = 30)]
    pub generations: usize,
    /// Defaults to 15 per tuned layer, at most 60.
    #[arg(long)]
    pub pop_size: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub mutation: f64,
    #[arg(long, default_value_t = 0.7)]
    pub crossover: f64,
    /// Bounds for every layer as LOW:HIGH.
    #[arg(long)]
    pub bounds: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_VALIDATION)]
    pub validation_size: usize,
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated variances in [0, 1].
    #[arg(long, default_value = "0,0.25,0.5,0.75,1.0")]
    pub variances: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoints to compare; repeat the flag.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Fixed rate-mode window for rate-coded checkpoints.
    #[arg(long)]
    pub rate_timesteps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub limit: Option<usize>,
}

/// An error tagged with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_CONFIG,
        message: e.to_string(),
    }
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_DATA,
        message: format!("data: {e}"),
    }
}

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_CHECKPOINT,
        message: format!("checkpoint {}: {e}", path.display()),
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Argument(_) | Error::Parameter(_) => EXIT_CONFIG,
            Error::Format(_) | Error::Consistency(_) => EXIT_DATA,
            Error::Version { .. } | Error::Corrupt(_) => EXIT_CHECKPOINT,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(cli.command, &argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(command: Command, argv: &[String]) -> CliResult<()> {
    match command {
        Command::Train(a) => cmd_train(a, argv),
        Command::Eval(a) => cmd_eval(a, argv),
        Command::Tune(a) => cmd_tune(a, argv),
        Command::Noise(a) => cmd_noise(a, argv),
        Command::Report(a) => cmd_report(a, argv),
    }
}

/// Everything needed to rerun a command, written before work starts.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: String,
    pub seed: u64,
    pub artifacts: Vec<(String, PathBuf)>,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub code_version: String,
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], config: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            config,
            seed,
            artifacts: Vec::new(),
            started_unix: unix_now(),
            finished_unix: None,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn artifact(mut self, name: &str, path: PathBuf) -> Self {
        self.artifacts.push((name.to_string(), path));
        self
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "command = {}", self.command).expect("write to string");
        writeln!(out, "argv = {}", self.argv.join(" ")).expect("write to string");
        writeln!(out, "seed = {}", self.seed).expect("write to string");
        writeln!(out, "code_version = {}", self.code_version).expect("write to string");
        writeln!(out, "started_unix = {}", self.started_unix).expect("write to string");
        if let Some(t) = self.finished_unix {
            writeln!(out, "finished_unix = {t}").expect("write to string");
        }
        for (name, path) in &self.artifacts {
            writeln!(out, "artifact.{name} = {}", path.display()).expect("write to string");
        }
        for line in self.config.lines() {
            writeln!(out, "config.{}", line.trim()).expect("write to string");
        }
        out
    }

    pub fn write(&self, out_dir: &Path) -> CliResult<()> {
        write_text(&out_dir.join("manifest.txt"), &self.to_text())?;
        Ok(())
    }

    fn finish(mut self, out_dir: &Path) -> CliResult<()> {
        self.finished_unix = Some(unix_now());
        self.write(out_dir)
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn data_root(flag: &Option<PathBuf>) -> CliResult<PathBuf> {
    let root = flag
        .clone()
        .or_else(data_root_from_env)
        .ok_or_else(|| data_err("no dataset directory: pass --data or set SPIKEFIRST_DATA"))?;
    if !root.is_dir() {
        return Err(data_err(format!("{} is not a directory", root.display())));
    }
    Ok(root)
}

/// Train and test splits of `name`, standardized for CIFAR-10.
fn load_splits(name: DatasetName, root: &Path) -> CliResult<(Dataset, Dataset)> {
    match name {
        DatasetName::Mnist => Ok((
            load_mnist(root, Split::Train).map_err(data_err)?,
            load_mnist(root, Split::Test).map_err(data_err)?,
        )),
        DatasetName::Cifar10 => {
            let (train, test, _) = load_cifar10(root).map_err(data_err)?;
            Ok((train, test))
        }
    }
}

fn load_test(name: DatasetName, root: &Path, limit: Option<usize>) -> CliResult<Dataset> {
    let test = match name {
        DatasetName::Mnist => load_mnist(root, Split::Test).map_err(data_err)?,
        DatasetName::Cifar10 => load_splits(name, root)?.1,
    };
    Ok(match limit {
        Some(n) => test.take(n),
        None => test,
    })
}

fn open_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    load_checkpoint(path).map_err(|e| ckpt_err(path, e))
}

/// Resolves the training config: preset, then file, then flags.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig, Error> {
    let file = match &a.config {
        Some(path) => {
            Some(KvMap::parse(&fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read {}: {e}", path.display()))
            })?)?)
        }
        None => None,
    };
    let preset = match (&a.preset, file.as_ref().and_then(|f| f.try_get("preset"))) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => p.to_string(),
        (None, None) => match &file {
            Some(f) if f.try_get("dataset").is_some() && f.try_get("model").is_some() => base_preset(f)?,
            _ => {
                return Err(Error::Config(
                    "pass --preset or a config with 'preset' or 'dataset' and 'model' keys".into(),
                ))
            }
        },
    };
    let mut config = TrainConfig::preset(&preset)?;
    if let Some(mut file) = file {
        file = KvMap::parse(
            &file
                .entries()
                .iter()
                .filter(|(k, _)| k != "preset")
                .map(|(k, v)| format!("{k} = {v}\n"))
                .collect::<String>(),
        )?;
        config.apply(&file)?;
    }
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.lr {
        config.lr = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.timesteps {
        config.horizon = v;
    }
    let sets = KvMap::parse(&a.set.join("\n"))?;
    config.apply(&sets)?;
    config.validate()?;
    Ok(config)
}

fn cmd_train(a: TrainArgs, argv: &[String]) -> CliResult<()> {
    let config = resolve_train_config(&a)?;
    let out = a.common.out.clone();
    let last = out.join("last.ckpt");
    let manifest = RunManifest::new("train", argv, config.to_text(), config.seed)
        .artifact("last_checkpoint", last.clone())
        .artifact("best_checkpoint", out.join("best.ckpt"))
        .artifact("epoch_log", out.join("epochs.csv"));
    manifest.write(&out)?;

    let root = data_root(&a.common.data)?;
    let (train_ds, test_ds) = load_splits(config.dataset, &root)?;
    let start = if a.resume && last.exists() {
        let ckpt = open_checkpoint(&last)?;
        if ckpt.config != config {
            return Err(config_err(format!(
                "{} was trained with a different config",
                last.display()
            )));
        }
        ckpt
    } else {
        Checkpoint::fresh(&config)?
    };
    println!("{}", start.spec.audit());
    let options = TrainOptions {
        workers: a.common.workers.max(1),
        out_dir: Some(out.clone()),
        stop_after: None,
    };
    let outcome = train_from(start, &train_ds, &test_ds, &options)?;
    println!(
        "trained {} epochs; best test accuracy {:.4}",
        outcome.last.epoch,
        outcome.best.best_acc.max(0.0)
    );
    manifest.finish(&out)
}

fn parse_mode(mode: &Option<String>) -> CliResult<Option<Coding>> {
    mode.as_deref().map(|m| m.parse().map_err(config_err)).transpose()
}

fn print_report(name: &str, r: &MetricsReport) {
    println!("{name}");
    println!("  accuracy       {:.4}", r.accuracy);
    println!("  mean latency   {:.3} of {} steps", r.mean_latency, r.horizon);
    for (i, rate) in r.layer_rates.iter().enumerate() {
        println!("  rate layer {}   {rate:.5}", i + 1);
    }
    println!(
        "  energy cost    {:.4} (with input layer {:.4})",
        r.energy_cost, r.energy_cost_with_input
    );
}

fn cmd_eval(a: EvalArgs, argv: &[String]) -> CliResult<()> {
    let mode = parse_mode(&a.mode)?;
    if a.timesteps == Some(0) {
        return Err(config_err("--timesteps must be >= 1"));
    }
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let out = a.common.out.clone();
    let manifest = RunManifest::new("eval", argv, ckpt.config.to_text(), a.seed)
        .artifact("checkpoint", a.checkpoint.clone())
        .artifact("metrics", out.join("metrics.csv"))
        .artifact("rates", out.join("rates.csv"));
    manifest.write(&out)?;
    let root = data_root(&a.common.data)?;
    let test = load_test(ckpt.config.dataset, &root, a.limit)?;
    let net = ckpt.network()?;
    let mut options = EvalOptions::for_network(&net);
    options.mode = mode.unwrap_or(options.mode);
    options.horizon = a.timesteps;
    options.seed = a.seed;
    options.workers = a.common.workers.max(1);
    let report = evaluate(&net, &test, &options)?;
    let name = ckpt.config.model.to_string();
    print_report(&name, &report);
    write_text(
        &out.join("metrics.csv"),
        &format!("{REPORT_HEADER}\n{}\n", report.csv_row(&name)),
    )?;
    write_text(&out.join("rates.csv"), &report.rates_csv())?;
    manifest.finish(&out)
}

fn parse_bounds(text: &str) -> CliResult<(f64, f64)> {
    let (lo, hi) = text
        .split_once(':')
        .ok_or_else(|| config_err(format!("bounds '{text}' must look like LOW:HIGH")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| config_err(format!("bad bound '{s}'")))
    };
    Ok((parse(lo)?, parse(hi)?))
}

fn cmd_tune(a: TuneArgs, argv: &[String]) -> CliResult<()> {
    let (lo, hi) = match &a.bounds {
        Some(b) => parse_bounds(b)?,
        None => DEFAULT_BOUNDS,
    };
    if !(lo > 0.0 && lo <= hi) {
        return Err(config_err(format!("bounds [{lo}, {hi}] must satisfy 0 < low <= high")));
    }
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let dims = ckpt.spec.layer_params().len();
    let mut de = DeConfig::with_bounds(vec![(lo, hi); dims]);
    if let Some(p) = a.pop_size {
        de.pop_size = p;
    }
    de.max_generations = a.generations;
    de.mutation_factor = a.mutation;
    de.crossover_rate = a.crossover;
    de.latency_weight = a.beta;
    de.seed = a.seed;
    de.validate()?;

    let out = a.common.out.clone();
    let manifest = RunManifest::new("tune", argv, format!("{de:?}\n{}", ckpt.config.to_text()), a.seed)
        .artifact("checkpoint", a.checkpoint.clone())
        .artifact("history", out.join("de_history.csv"))
        .artifact("tuned_checkpoint", out.join("tuned.ckpt"));
    manifest.write(&out)?;
    let root = data_root(&a.common.data)?;
    let (train, _) = load_splits(ckpt.config.dataset, &root)?;
    let options = TuneOptions {
        validation_size: a.validation_size,
        eval_seed: a.seed,
        workers: a.common.workers.max(1),
    };
    let (result, tuned) = tune_checkpoint(&ckpt, &train, &de, &options)?;
    write_text(&out.join("de_history.csv"), &result.history_csv())?;
    save_checkpoint(&tuned, &out.join("tuned.ckpt"))?;
    println!(
        "best objective {:.5} at {:?} after {} evaluations",
        result.best_objective, result.best_vector, result.evaluations
    );
    manifest.finish(&out)
}

/// Parses a comma-separated variance list; every value must lie in [0, 1].
pub fn parse_variances(text: &str) -> Result<Vec<f64>, Error> {
    let values = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad variance '{}'", s.trim())))
        })
        .collect::<Result<Vec<f64>, Error>>()?;
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Config(format!("variance {v} outside [0, 1]")));
    }
    Ok(values)
}

fn cmd_noise(a: NoiseArgs, argv: &[String]) -> CliResult<()> {
    let variances = parse_variances(&a.variances)?;
    let ckpt = open_checkpoint(&a.checkpoint)?;
    let out = a.common.out.clone();
    let manifest = RunManifest::new("noise", argv, ckpt.config.to_text(), a.seed)
        .artifact("checkpoint", a.checkpoint.clone())
        .artifact("noise", out.join("noise.csv"));
    manifest.write(&out)?;
    let root = data_root(&a.common.data)?;
    let test = load_test(ckpt.config.dataset, &root, a.limit)?;
    let net = ckpt.network()?;
    let mut options = EvalOptions::for_network(&net);
    options.seed = a.seed;
    options.workers = a.common.workers.max(1);
    let rows = noise_sweep(&net, &test, &variances, &options)?;
    for (v, acc) in &rows {
        println!("variance {v:<5} accuracy {acc:.4}");
    }
    write_text(&out.join("noise.csv"), &noise_csv(&rows))?;
    manifest.finish(&out)
}

fn cmd_report(a: ReportArgs, argv: &[String]) -> CliResult<()> {
    let out = a.common.out.clone();
    let manifest = RunManifest::new("report", argv, String::new(), a.seed)
        .artifact("report", out.join("report.csv"))
        .artifact("rates", out.join("report_rates.csv"));
    manifest.write(&out)?;
    let root = data_root(&a.common.data)?;
    let mut table = format!("{REPORT_HEADER}\n");
    let mut rates = String::from("model,layer_index,rate\n");
    for path in &a.checkpoints {
        let ckpt = open_checkpoint(path)?;
        let test = load_test(ckpt.config.dataset, &root, a.limit)?;
        let net = ckpt.network()?;
        let mut options = EvalOptions::for_network(&net);
        options.seed = a.seed;
        options.workers = a.common.workers.max(1);
        if net.spec.coding == Coding::Rate {
            options.horizon = a.rate_timesteps;
        }
        let report = evaluate(&net, &test, &options)?;
        let name = format!("{}/{}", ckpt.config.arch, ckpt.config.model);
        print_report(&name, &report);
        writeln!(table, "{}", report.csv_row(&name)).expect("write to string");
        for (i, r) in report.layer_rates.iter().enumerate() {
            writeln!(rates, "{name},{},{r:.6}", i + 1).expect("write to string");
        }
    }
    write_text(&out.join("report.csv"), &table)?;
    write_text(&out.join("report_rates.csv"), &rates)?;
    manifest.finish(&out)
}
