//! `exitwise` command-line runner.
//!
//! Exit status is 0 on success, 2 for usage and configuration errors and 1
//! for runtime failures. Data and summaries go to stdout, diagnostics to
//! stderr.

mod commands;
mod config;

use std::ffi::OsString;
use std::fmt;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Config(ConfigError),
    Run(exitwise::Error),
    Io(io::Error),
}

impl CliError {
    fn status(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Run(exitwise::Error::Config { .. }) => 2,
            CliError::Run(_) | CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage error: {msg}"),
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Run(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<exitwise::Error> for CliError {
    fn from(e: exitwise::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "exitwise", version, about = "Multi-exit domain adaptation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Directory with source.csv, target.csv and target_eval.csv (default: --out).
    #[arg(long, global = true, value_name = "DIR")]
    data_dir: Option<PathBuf>,
    /// Checkpoint path (default: <out>/model.ckpt).
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Override any configuration key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate source.csv, target.csv and target_eval.csv.
    GenData(GenArgs),
    /// Warm up, self-train and write model.ckpt, metrics.csv and summary.json.
    Train(TrainArgs),
    /// Score the target set and write selection.csv.
    SelectDump(SelectArgs),
    /// Per-exit accuracy and cost, written to anytime.csv.
    EvalAnytime(EvalArgs),
    /// Budget-calibrated early exit, written to budget_curve.csv.
    EvalBudget(BudgetArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// two-moons or blobs.
    #[arg(long)]
    kind: Option<String>,
    /// Rows per domain.
    #[arg(long)]
    n: Option<usize>,
    /// Two-moons rotation of the target, in degrees.
    #[arg(long, allow_hyphen_values = true)]
    rotate: Option<f64>,
    /// Two-moons noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    /// Blobs class count.
    #[arg(long)]
    classes: Option<usize>,
    /// Blobs dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Blobs translation of the target along every axis.
    #[arg(long, allow_hyphen_values = true)]
    shift: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    selftrain_epochs: Option<usize>,
    #[arg(long)]
    exit_count: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
}

#[derive(Args, Debug)]
struct SelectArgs {
    /// confidence or threshold.
    #[arg(long)]
    mode: Option<String>,
    /// Threshold for `--mode threshold`.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// Epoch whose random stream assigns exits.
    #[arg(long)]
    epoch: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Labeled evaluation file (default: <data_dir>/target_eval.csv).
    #[arg(long, value_name = "PATH")]
    eval: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BudgetArgs {
    /// Comma-separated ascending MAC budgets.
    #[arg(long, value_name = "A,B,C")]
    budgets: Option<String>,
    /// Calibration file (default: <data_dir>/target.csv).
    #[arg(long, value_name = "PATH")]
    val: Option<PathBuf>,
    /// Labeled evaluation file (default: <data_dir>/target_eval.csv).
    #[arg(long, value_name = "PATH")]
    eval: Option<PathBuf>,
}

fn put<T: ToString>(cfg: &mut RunConfig, key: &str, value: Option<T>) -> Result<(), ConfigError> {
    match value {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn put_path(cfg: &mut RunConfig, key: &str, value: &Option<PathBuf>) -> Result<(), ConfigError> {
    put(cfg, key, value.as_ref().map(|p| p.display().to_string()))
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    let c = &cli.common;
    if let Some(path) = &c.config {
        let text = std::fs::read_to_string(path).map_err(|e| exitwise::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_text(&text)?;
    }
    for assignment in &c.set {
        cfg.apply_assignment(assignment)?;
    }
    put(&mut cfg, "seed", c.seed)?;
    put_path(&mut cfg, "out", &c.out)?;
    put_path(&mut cfg, "data_dir", &c.data_dir)?;
    put_path(&mut cfg, "checkpoint", &c.checkpoint)?;
    match &cli.command {
        Command::GenData(a) => {
            put(&mut cfg, "kind", a.kind.as_ref())?;
            put(&mut cfg, "n", a.n)?;
            put(&mut cfg, "rotate", a.rotate)?;
            put(&mut cfg, "noise", a.noise)?;
            put(&mut cfg, "class_count", a.classes)?;
            put(&mut cfg, "dim", a.dim)?;
            put(&mut cfg, "shift", a.shift)?;
        }
        Command::Train(a) => {
            put(&mut cfg, "alpha", a.alpha)?;
            put(&mut cfg, "beta", a.beta)?;
            put(&mut cfg, "mu", a.mu)?;
            put(&mut cfg, "warmup_epochs", a.warmup_epochs)?;
            put(&mut cfg, "selftrain_epochs", a.selftrain_epochs)?;
            put(&mut cfg, "exit_count", a.exit_count)?;
            put(&mut cfg, "lr0", a.lr0)?;
        }
        Command::SelectDump(a) => {
            put(&mut cfg, "mode", a.mode.as_ref())?;
            put(&mut cfg, "tau", a.tau)?;
            put(&mut cfg, "mu", a.mu)?;
            put(&mut cfg, "select_epoch", a.epoch)?;
        }
        Command::EvalAnytime(a) => put_path(&mut cfg, "eval", &a.eval)?,
        Command::EvalBudget(a) => {
            put(&mut cfg, "budgets", a.budgets.as_ref())?;
            put_path(&mut cfg, "val", &a.val)?;
            put_path(&mut cfg, "eval", &a.eval)?;
        }
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve(cli)?;
    match cli.command {
        Command::GenData(_) => commands::gen_data(&cfg, stdout),
        Command::Train(_) => commands::train_cmd(&cfg, stdout, stderr),
        Command::SelectDump(_) => commands::select_dump(&cfg, stdout),
        Command::EvalAnytime(_) => commands::eval_anytime_cmd(&cfg, stdout),
        Command::EvalBudget(_) => commands::eval_budget_cmd(&cfg, stdout),
    }
}

fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let stdout = io::stdout();
    let stderr = io::stderr();
    let mut out = stdout.lock();
    let mut err = stderr.lock();
    match dispatch(&cli, &mut out, &mut err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "exitwise: {e}");
            e.status()
        }
    }
}

fn main() {
    std::process::exit(run(std::env::args_os()));
}
