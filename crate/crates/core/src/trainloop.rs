//! The two-step training procedure.
//!
//! Step 1 warms the network up on `L_s + α·L_d`. Step 2 rebuilds the
//! self-training set from the current parameters at the start of every epoch,
//! then runs one epoch of mixed batches on `L_s + α·L_d + β·L_t`.
//!
//! Both steps share one progress variable `p ∈ [0, 1)`, measured over
//! `warmup_epochs + selftrain_epochs`, which drives the learning-rate
//! annealing and the reversal-strength ramp.

use std::io::{self, Write};
use std::time::Instant;

use crate::adversarial::{domain_loss, grl_schedule, lr_schedule, source_loss, LossReport};
use crate::cascade::MultiExitNet;
use crate::dataset::{make_mixed_batches, BatchPlan, DomainSet};
use crate::error::{Error, Result};
use crate::seed::{self, TAG_ASSIGN, TAG_BATCHES};
use crate::selftrain::{assign_exits, select_confident, target_loss, PredictionPanel, SelectionRule, SelfTrainSet};

pub use crate::cascade::{load_checkpoint, save_checkpoint};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Weight of the domain confusion loss.
    pub alpha: f64,
    /// Weight of the self-training loss.
    pub beta: f64,
    /// Share of the target set eligible for self-training.
    pub mu: f64,
    pub warmup_epochs: usize,
    pub selftrain_epochs: usize,
    pub batch: BatchPlan,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Anneal the learning rate as `lr0 / (1 + 10p)^0.75`; otherwise constant.
    pub anneal_lr: bool,
    /// Ramp the reversal strength as `2 / (1 + e^(-10p)) - 1`; otherwise 1.
    pub grl_schedule: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 1.0,
            mu: 0.8,
            warmup_epochs: 20,
            selftrain_epochs: 20,
            batch: BatchPlan::default(),
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            anneal_lr: true,
            grl_schedule: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lr0", self.lr0),
            ("weight_decay", self.weight_decay),
        ];
        for (key, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a finite value >= 0"));
            }
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(Error::config("mu", "must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        self.batch.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.selftrain_epochs
    }

    fn lr_at(&self, progress: f64) -> f64 {
        if self.anneal_lr {
            lr_schedule(self.lr0, progress)
        } else {
            self.lr0
        }
    }

    fn lambda_at(&self, progress: f64) -> f64 {
        if self.grl_schedule {
            grl_schedule(progress)
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    SelfTrain,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::SelfTrain => "selftrain",
        }
    }
}

/// One row of the training log.
///
/// Fields prefixed `oracle_` come from shadow target labels. They are
/// reported only and never reach any training path.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based over the whole run.
    pub epoch: usize,
    pub phase: Phase,
    /// Learning rate and reversal strength at the first batch.
    pub lr: f64,
    pub grl_lambda: f64,
    /// Mean over the epoch's batches.
    pub losses: LossReport,
    /// Per-exit accuracy on the labeled source set after the epoch.
    pub source_acc: Vec<f64>,
    pub oracle_target_acc: Option<Vec<f64>>,
    /// Self-training set used during the epoch.
    pub selected: usize,
    pub class_counts: Vec<usize>,
    pub caps: Vec<f64>,
    pub oracle_pseudo_acc: Option<f64>,
    pub wall_ms: u128,
}

/// Metrics and the self-training sets of a run, one set per Step 2 epoch.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub metrics: Vec<EpochMetrics>,
    pub selections: Vec<SelfTrainSet>,
}

fn check_domains(source: &DomainSet, target: &DomainSet) -> Result<()> {
    if source.is_empty() {
        return Err(Error::EmptyDomain("source set has no rows".into()));
    }
    if target.is_empty() {
        return Err(Error::EmptyDomain("target set has no rows".into()));
    }
    Ok(())
}

fn exit_accuracies(net: &MultiExitNet, set: &DomainSet, labels: &[usize]) -> Result<Vec<f64>> {
    let pass = net.forward_all(set.features())?;
    Ok(pass
        .probs
        .iter()
        .map(|p| {
            let hits = labels.iter().enumerate().filter(|&(i, &y)| p.argmax_row(i) == y).count();
            hits as f64 / labels.len() as f64
        })
        .collect())
}

/// Runs one epoch of mixed batches and returns the mean loss terms.
fn run_epoch(
    net: &mut MultiExitNet,
    source: &DomainSet,
    source_labels: &[usize],
    target: &DomainSet,
    selftrain: &SelfTrainSet,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, f64, LossReport)> {
    let mut rng = seed::stream(cfg.seed, TAG_BATCHES, epoch as u64);
    let batches = make_mixed_batches(source, target, selftrain, &cfg.batch, &mut rng)?;
    let total = cfg.total_epochs() as f64;
    let n_batches = batches.len() as f64;
    let progress = |b: usize| (epoch as f64 + b as f64 / n_batches) / total;
    let (lr_first, lambda_first) = (cfg.lr_at(progress(0)), cfg.lambda_at(progress(0)));
    let mut reports = Vec::with_capacity(batches.len());
    for (b, batch) in batches.iter().enumerate() {
        let (lr, lambda) = (cfg.lr_at(progress(b)), cfg.lambda_at(progress(b)));
        let xs = source.features().select_rows(&batch.source_rows);
        let ys: Vec<usize> = batch.source_rows.iter().map(|&r| source_labels[r]).collect();
        let xt = target.features().select_rows(&batch.target_rows);

        let ls = source_loss(net, &xs, &ys)?;
        let ld = domain_loss(net, &xs, &xt, lambda)?;
        let entries: Vec<_> = batch.pseudo_entries.iter().map(|&i| selftrain.entries[i]).collect();
        let lt = target_loss(net, &entries, target.features())?;

        let mut grads = ls.grads;
        if cfg.alpha != 0.0 {
            grads.add_scaled(&ld.grads, cfg.alpha)?;
        }
        if cfg.beta != 0.0 && !entries.is_empty() {
            grads.add_scaled(&lt.grads, cfg.beta)?;
        }
        net.apply_gradients(&grads, lr, cfg.momentum, cfg.weight_decay)?;
        reports.push(LossReport::new(
            ls.loss,
            ld.loss,
            lt.loss,
            cfg.alpha,
            cfg.beta,
            ls.per_exit,
            ld.per_exit,
        ));
    }
    let mean = LossReport::mean(&reports, cfg.alpha, cfg.beta)
        .ok_or_else(|| Error::State("epoch produced no batches".into()))?;
    Ok((lr_first, lambda_first, mean))
}

#[allow(clippy::too_many_arguments)]
fn epoch_metrics(
    net: &MultiExitNet,
    source: &DomainSet,
    source_labels: &[usize],
    target: &DomainSet,
    epoch: usize,
    phase: Phase,
    (lr, grl_lambda, losses): (f64, f64, LossReport),
    selftrain: &SelfTrainSet,
    started: Instant,
) -> Result<EpochMetrics> {
    let c = net.class_count();
    let shadow = target.shadow_labels();
    let oracle_target_acc = match shadow {
        Some(truth) => Some(exit_accuracies(net, target, truth)?),
        None => None,
    };
    Ok(EpochMetrics {
        epoch: epoch + 1,
        phase,
        lr,
        grl_lambda,
        losses,
        source_acc: exit_accuracies(net, source, source_labels)?,
        oracle_target_acc,
        selected: selftrain.len(),
        class_counts: selftrain.per_class_counts(c),
        caps: selftrain.caps().to_vec(),
        oracle_pseudo_acc: shadow.and_then(|t| selftrain.pseudo_label_accuracy(t)),
        wall_ms: started.elapsed().as_millis(),
    })
}

fn empty_set() -> SelfTrainSet {
    SelfTrainSet {
        entries: Vec::new(),
        rule: SelectionRule::Balanced { caps: Vec::new() },
    }
}

/// Step 1: `warmup_epochs` epochs of `L_s + α·L_d` on source and target.
pub fn step1_warmup(
    net: &mut MultiExitNet,
    source: &DomainSet,
    target: &DomainSet,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    check_domains(source, target)?;
    let labels = source.require_labels()?;
    let none = empty_set();
    let mut out = Vec::with_capacity(cfg.warmup_epochs);
    for epoch in 0..cfg.warmup_epochs {
        let started = Instant::now();
        let step = run_epoch(net, source, &labels, target, &none, cfg, epoch)?;
        out.push(epoch_metrics(net, source, &labels, target, epoch, Phase::Warmup, step, &none, started)?);
    }
    Ok(out)
}

/// Scores the target set with `net`, selects under class-balanced caps and
/// assigns exits from the `assign` stream of `epoch` (0-based over the run).
pub fn build_selftrain_set(net: &MultiExitNet, target: &DomainSet, cfg: &TrainConfig, epoch: usize) -> Result<SelfTrainSet> {
    let panel = PredictionPanel::evaluate(net, target.features())?;
    let selected = select_confident(&panel, cfg.mu)?;
    let mut rng = seed::stream(cfg.seed, TAG_ASSIGN, epoch as u64);
    assign_exits(&selected, net.exit_count(), &mut rng)
}

/// Every class count must stay within `⌈λ_c⌉` and the caps must sum to
/// `μ·N_t`.
fn check_caps(set: &SelfTrainSet, n_target: usize, mu: f64, class_count: usize) -> Result<()> {
    let caps = set.caps();
    let want = mu * n_target as f64;
    if (caps.iter().sum::<f64>() - want).abs() > 1e-9 * want.max(1.0) {
        return Err(Error::State(format!("class caps sum to {} instead of {want}", caps.iter().sum::<f64>())));
    }
    for (c, (&count, &cap)) in set.per_class_counts(class_count).iter().zip(caps).enumerate() {
        if count as f64 > cap.ceil() {
            return Err(Error::State(format!("class {c} admitted {count} samples over cap {cap}")));
        }
    }
    Ok(())
}

/// Step 2: `selftrain_epochs` epochs, each preceded by a fresh selection.
///
/// Epoch numbering continues after the warm-up so the schedules and random
/// streams line up with an uninterrupted run. With `β = 0` the self-training
/// set is still built and logged but batches carry no pseudo-labeled rows,
/// which makes the run identical to a longer warm-up.
pub fn step2_selftrain(
    net: &mut MultiExitNet,
    source: &DomainSet,
    target: &DomainSet,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_domains(source, target)?;
    let labels = source.require_labels()?;
    let mut log = TrainLog::default();
    for i in 0..cfg.selftrain_epochs {
        let epoch = cfg.warmup_epochs + i;
        let started = Instant::now();
        let selection = build_selftrain_set(net, target, cfg, epoch)?;
        check_caps(&selection, target.len(), cfg.mu, net.class_count())?;
        let batch_set = if cfg.beta == 0.0 { empty_set() } else { selection.clone() };
        let step = run_epoch(net, source, &labels, target, &batch_set, cfg, epoch)?;
        log.metrics.push(epoch_metrics(
            net,
            source,
            &labels,
            target,
            epoch,
            Phase::SelfTrain,
            step,
            &selection,
            started,
        )?);
        log.selections.push(selection);
    }
    Ok(log)
}

/// Warm-up followed by self-training.
pub fn train(net: &mut MultiExitNet, source: &DomainSet, target: &DomainSet, cfg: &TrainConfig) -> Result<TrainLog> {
    let mut metrics = step1_warmup(net, source, target, cfg)?;
    let mut log = step2_selftrain(net, source, target, cfg)?;
    metrics.append(&mut log.metrics);
    log.metrics = metrics;
    Ok(log)
}

/// Column names of the metrics file for `exits` exits and `classes` classes.
///
/// ```text
/// epoch,phase,lr,grl_lambda,l_s,l_d,l_t,total,
/// src_acc_1..K,oracle_tgt_acc_1..K,selected,count_0..C-1,cap_0..C-1,oracle_pseudo_acc
/// ```
///
/// Missing oracle values and caps of warm-up epochs are left empty. Wall-clock
/// time is not part of the file so that repeated runs compare byte for byte.
pub fn metrics_header(exits: usize, classes: usize) -> Vec<String> {
    let mut cols: Vec<String> = ["epoch", "phase", "lr", "grl_lambda", "l_s", "l_d", "l_t", "total"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend((1..=exits).map(|k| format!("src_acc_{k}")));
    cols.extend((1..=exits).map(|k| format!("oracle_tgt_acc_{k}")));
    cols.push("selected".into());
    cols.extend((0..classes).map(|c| format!("count_{c}")));
    cols.extend((0..classes).map(|c| format!("cap_{c}")));
    cols.push("oracle_pseudo_acc".into());
    cols
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], exits: usize, classes: usize, mut out: W) -> io::Result<()> {
    writeln!(out, "{}", metrics_header(exits, classes).join(","))?;
    for m in metrics {
        let l = &m.losses;
        let mut row = vec![
            m.epoch.to_string(),
            m.phase.as_str().to_string(),
            m.lr.to_string(),
            m.grl_lambda.to_string(),
            l.l_s.to_string(),
            l.l_d.to_string(),
            l.l_t.to_string(),
            l.total.to_string(),
        ];
        row.extend(m.source_acc.iter().map(f64::to_string));
        match &m.oracle_target_acc {
            Some(acc) => row.extend(acc.iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), exits)),
        }
        row.push(m.selected.to_string());
        row.extend(m.class_counts.iter().map(usize::to_string));
        if m.caps.is_empty() {
            row.extend(std::iter::repeat_n(String::new(), classes));
        } else {
            row.extend(m.caps.iter().map(f64::to_string));
        }
        row.push(opt(m.oracle_pseudo_acc));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// One parsed row of a metrics file, keyed by column name.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub fields: Vec<(String, String)>,
}

impl MetricsRow {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Numeric value of a column; `None` when absent or empty.
    pub fn num(&self, key: &str) -> Option<f64> {
        self.get(key).filter(|v| !v.is_empty()).and_then(|v| v.parse().ok())
    }
}

/// Parses a metrics file, checking every row against the header width.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines().enumerate();
    let header: Vec<String> = match lines.next() {
        Some((_, h)) if h.starts_with("epoch,phase,") => h.split(',').map(str::to_string).collect(),
        _ => return Err(Error::Format("metrics file has no header".into())),
    };
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let values: Vec<&str> = line.split(',').collect();
        if values.len() != header.len() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {} fields, found {}", header.len(), values.len()),
            });
        }
        rows.push(MetricsRow {
            fields: header.iter().cloned().zip(values.iter().map(|v| v.to_string())).collect(),
        });
    }
    Ok(rows)
}
