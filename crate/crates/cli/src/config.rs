//! Flat `key = value` run configuration.
//!
//! Values are resolved in increasing precedence: built-in defaults, the file
//! given by `--config`, each `--set key=value`, then dedicated flags such as
//! `--seed` or `--alpha`. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use exitwise::cascade::CascadeConfig;
use exitwise::dataset::BatchPlan;
use exitwise::trainloop::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config key `{}`: {}", self.key, self.msg)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    TwoMoons,
    Blobs,
}

impl FromStr for DataKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "two-moons" => Ok(DataKind::TwoMoons),
            "blobs" => Ok(DataKind::Blobs),
            _ => Err(format!("unknown generator `{s}` (expected two-moons or blobs)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    Confidence,
    Threshold,
}

impl FromStr for SelectMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "confidence" => Ok(SelectMode::Confidence),
            "threshold" => Ok(SelectMode::Threshold),
            _ => Err(format!("unknown mode `{s}` (expected confidence or threshold)")),
        }
    }
}

/// Every tunable of every command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Directory holding `source.csv`, `target.csv` and `target_eval.csv`.
    /// Empty means the output directory.
    pub data_dir: PathBuf,
    /// Empty means `<out>/model.ckpt`.
    pub checkpoint: PathBuf,

    pub kind: DataKind,
    pub n: usize,
    pub rotate: f64,
    pub noise: f64,
    pub dim: usize,
    pub shift: f64,
    pub class_count: usize,

    pub exit_count: usize,
    pub hidden_width: usize,
    pub disc_width: usize,

    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub warmup_epochs: usize,
    pub selftrain_epochs: usize,
    pub batch_size: usize,
    pub pseudo_fraction: f64,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub anneal_lr: bool,
    pub grl_schedule: bool,

    pub mode: SelectMode,
    pub tau: f64,
    /// Epoch index whose `assign` stream places exits in `select-dump`.
    /// Empty means the first self-training epoch.
    pub select_epoch: Option<usize>,

    /// Ascending MAC budgets for `eval-budget`.
    pub budgets: Vec<f64>,
    /// Evaluation file; empty means `<data_dir>/target_eval.csv`.
    pub eval: PathBuf,
    /// Calibration file; empty means `<data_dir>/target.csv`.
    pub val: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cascade = CascadeConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            seed: 0,
            out: PathBuf::from("."),
            data_dir: PathBuf::new(),
            checkpoint: PathBuf::new(),
            kind: DataKind::TwoMoons,
            n: 500,
            rotate: 30.0,
            noise: 0.1,
            dim: 2,
            shift: 1.0,
            class_count: cascade.class_count,
            exit_count: cascade.exit_count,
            hidden_width: cascade.hidden_width,
            disc_width: cascade.disc_width,
            alpha: train.alpha,
            beta: train.beta,
            mu: train.mu,
            warmup_epochs: train.warmup_epochs,
            selftrain_epochs: train.selftrain_epochs,
            batch_size: train.batch.batch_size,
            pseudo_fraction: train.batch.pseudo_fraction,
            lr0: train.lr0,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            anneal_lr: train.anneal_lr,
            grl_schedule: train.grl_schedule,
            mode: SelectMode::Confidence,
            tau: 0.9,
            select_epoch: None,
            budgets: Vec::new(),
            eval: PathBuf::new(),
            val: PathBuf::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError {
        key: key.to_string(),
        msg: format!("cannot parse `{value}`: {e}"),
    })
}

/// Comma-separated ascending numbers.
pub fn parse_budgets(value: &str) -> Result<Vec<f64>, ConfigError> {
    let err = |msg: String| ConfigError {
        key: "budgets".into(),
        msg,
    };
    let budgets = value
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| err(format!("`{s}` is not a number"))))
        .collect::<Result<Vec<f64>, _>>()?;
    if budgets.iter().any(|b| !b.is_finite()) {
        return Err(err("budgets must be finite".into()));
    }
    if budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(err("budgets must be sorted ascending".into()));
    }
    Ok(budgets)
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "out",
        "data_dir",
        "checkpoint",
        "kind",
        "n",
        "rotate",
        "noise",
        "dim",
        "shift",
        "class_count",
        "exit_count",
        "hidden_width",
        "disc_width",
        "alpha",
        "beta",
        "mu",
        "warmup_epochs",
        "selftrain_epochs",
        "batch_size",
        "pseudo_fraction",
        "lr0",
        "momentum",
        "weight_decay",
        "anneal_lr",
        "grl_schedule",
        "mode",
        "tau",
        "select_epoch",
        "budgets",
        "eval",
        "val",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "data_dir" => self.data_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "kind" => self.kind = parse(key, v)?,
            "n" => self.n = parse(key, v)?,
            "rotate" => self.rotate = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "shift" => self.shift = parse(key, v)?,
            "class_count" => self.class_count = parse(key, v)?,
            "exit_count" => self.exit_count = parse(key, v)?,
            "hidden_width" => self.hidden_width = parse(key, v)?,
            "disc_width" => self.disc_width = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "mu" => self.mu = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "selftrain_epochs" => self.selftrain_epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "pseudo_fraction" => self.pseudo_fraction = parse(key, v)?,
            "lr0" => self.lr0 = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "anneal_lr" => self.anneal_lr = parse(key, v)?,
            "grl_schedule" => self.grl_schedule = parse(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "select_epoch" => self.select_epoch = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "budgets" => self.budgets = if v.is_empty() { Vec::new() } else { parse_budgets(v)? },
            "eval" => self.eval = PathBuf::from(v),
            "val" => self.val = PathBuf::from(v),
            _ => {
                return Err(ConfigError {
                    key: key.to_string(),
                    msg: format!("unknown key; known keys are {}", RunConfig::KEYS.join(", ")),
                })
            }
        }
        Ok(())
    }

    /// Applies a config file body. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError {
                key: format!("line {}", i + 1),
                msg: format!("expected `key = value`, found `{raw}`"),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override from `--set`.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| ConfigError {
            key: assignment.to_string(),
            msg: "expected key=value".into(),
        })?;
        self.set(key.trim(), value)
    }

    fn data_dir(&self) -> &Path {
        if self.data_dir.as_os_str().is_empty() {
            &self.out
        } else {
            &self.data_dir
        }
    }

    pub fn source_path(&self) -> PathBuf {
        self.data_dir().join("source.csv")
    }

    pub fn target_path(&self) -> PathBuf {
        self.data_dir().join("target.csv")
    }

    pub fn target_eval_path(&self) -> PathBuf {
        self.data_dir().join("target_eval.csv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        if self.checkpoint.as_os_str().is_empty() {
            self.out.join("model.ckpt")
        } else {
            self.checkpoint.clone()
        }
    }

    pub fn eval_path(&self) -> PathBuf {
        if self.eval.as_os_str().is_empty() {
            self.target_eval_path()
        } else {
            self.eval.clone()
        }
    }

    pub fn val_path(&self) -> PathBuf {
        if self.val.as_os_str().is_empty() {
            self.target_path()
        } else {
            self.val.clone()
        }
    }

    pub fn cascade(&self, input_dim: usize) -> CascadeConfig {
        CascadeConfig {
            input_dim,
            exit_count: self.exit_count,
            hidden_width: self.hidden_width,
            disc_width: self.disc_width,
            class_count: self.class_count,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            beta: self.beta,
            mu: self.mu,
            warmup_epochs: self.warmup_epochs,
            selftrain_epochs: self.selftrain_epochs,
            batch: BatchPlan {
                batch_size: self.batch_size,
                pseudo_fraction: self.pseudo_fraction,
            },
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            anneal_lr: self.anneal_lr,
            grl_schedule: self.grl_schedule,
        }
    }
}
