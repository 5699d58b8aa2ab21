use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use exitwise::cascade::{load_checkpoint, save_checkpoint, MultiExitNet};
use exitwise::dataset::{gen_blobs_shift, gen_two_moons_shift, load_csv, save_csv, DomainSet, DomainTag};
use exitwise::inference::{eval_anytime, eval_budget_curve, write_anytime_csv, write_budget_csv};
use exitwise::seed::{self, TAG_ASSIGN};
use exitwise::selftrain::{assign_exits, select_by_threshold, select_confident, PredictionPanel};
use exitwise::trainloop::{train, write_metrics_csv};
use exitwise::Error;

use crate::config::{DataKind, RunConfig, SelectMode};
use crate::CliError;

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let (source, target) = match cfg.kind {
        DataKind::TwoMoons => gen_two_moons_shift(cfg.n, cfg.rotate, cfg.noise, cfg.seed)?,
        DataKind::Blobs => gen_blobs_shift(cfg.n, cfg.class_count, cfg.dim, &vec![cfg.shift; cfg.dim], cfg.seed)?,
    };
    let target_eval = target.reveal_labels()?;
    ensure_dir(&cfg.out)?;
    for (name, set) in [("source.csv", &source), ("target.csv", &target), ("target_eval.csv", &target_eval)] {
        save_csv(set, cfg.out.join(name))?;
        writeln!(stdout, "{name} {}", set.len())?;
    }
    Ok(())
}

/// Loads the unlabeled target set and, when the evaluation file is present,
/// attaches its labels as shadow labels for oracle reporting.
fn load_target(cfg: &RunConfig, class_count: usize) -> Result<DomainSet, CliError> {
    let target = load_csv(cfg.target_path(), DomainTag::Target, class_count)?;
    let eval_path = cfg.target_eval_path();
    if !eval_path.exists() {
        return Ok(target);
    }
    let eval = load_csv(&eval_path, DomainTag::Target, class_count)?;
    if eval.features() != target.features() {
        return Err(Error::Format(format!(
            "{} does not hold the same rows as {}",
            eval_path.display(),
            cfg.target_path().display()
        ))
        .into());
    }
    Ok(target.with_shadow_labels(eval.require_labels()?)?)
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    exit_macs: Vec<u64>,
    final_source_acc: Vec<f64>,
    final_oracle_target_acc: Option<Vec<f64>>,
    final_selected: usize,
    final_class_counts: Vec<usize>,
    final_oracle_pseudo_acc: Option<f64>,
    final_total_loss: Option<f64>,
}

pub fn train_cmd(cfg: &RunConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let started = Instant::now();
    let train_cfg = cfg.train();
    train_cfg.validate()?;
    let source = load_csv(cfg.source_path(), DomainTag::Source, cfg.class_count)?;
    cfg.cascade(source.dim()).validate()?;
    let target = load_target(cfg, cfg.class_count)?;
    let mut net = MultiExitNet::new(cfg.cascade(source.dim()), cfg.seed)?;
    let log = train(&mut net, &source, &target, &train_cfg)?;

    ensure_dir(&cfg.out)?;
    save_checkpoint(&net, cfg.checkpoint_path())?;
    let mut metrics = Vec::new();
    write_metrics_csv(&log.metrics, net.exit_count(), net.class_count(), &mut metrics)?;
    write_file(&cfg.out.join("metrics.csv"), &metrics)?;

    let last = log.metrics.last();
    let summary = TrainSummary {
        epochs: log.metrics.len(),
        exit_macs: net.cost_model().prefix_sums(),
        final_source_acc: last.map(|m| m.source_acc.clone()).unwrap_or_default(),
        final_oracle_target_acc: last.and_then(|m| m.oracle_target_acc.clone()),
        final_selected: last.map_or(0, |m| m.selected),
        final_class_counts: last.map(|m| m.class_counts.clone()).unwrap_or_default(),
        final_oracle_pseudo_acc: last.and_then(|m| m.oracle_pseudo_acc),
        final_total_loss: last.map(|m| m.losses.total),
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_file(&cfg.out.join("summary.json"), format!("{json}\n").as_bytes())?;
    writeln!(stdout, "{json}")?;

    let per_epoch: Vec<String> = log.metrics.iter().map(|m| m.wall_ms.to_string()).collect();
    writeln!(
        stderr,
        "trained {} epochs in {} ms (per epoch: {})",
        log.metrics.len(),
        started.elapsed().as_millis(),
        per_epoch.join(" ")
    )?;
    Ok(())
}

pub fn select_dump(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let net = load_checkpoint(cfg.checkpoint_path())?;
    let target = load_target(cfg, net.class_count())?;
    let panel = PredictionPanel::evaluate(&net, target.features())?;
    let selected = match cfg.mode {
        SelectMode::Confidence => select_confident(&panel, cfg.mu)?,
        SelectMode::Threshold => select_by_threshold(&panel, cfg.tau)?,
    };
    let epoch = cfg.select_epoch.unwrap_or(cfg.warmup_epochs);
    let selected = assign_exits(&selected, net.exit_count(), &mut seed::stream(cfg.seed, TAG_ASSIGN, epoch as u64))?;

    let mut by_sample = vec![None; target.len()];
    for e in &selected.entries {
        by_sample[e.sample_index] = Some(e);
    }
    let mut out = String::from("index,pseudo_label,confidence,mean_max,selected,assigned_exit\n");
    let mean_max = panel.mean_max();
    for j in 0..target.len() {
        let (flag, exit) = match by_sample[j] {
            Some(e) => ("1", e.assigned_exit.map(|k| k.to_string()).unwrap_or_default()),
            None => ("0", String::new()),
        };
        out.push_str(&format!(
            "{j},{},{},{},{flag},{exit}\n",
            panel.pseudo_labels()[j],
            panel.confidence()[j],
            mean_max[j]
        ));
    }
    let counts = selected.per_class_counts(net.class_count());
    let counts_text: Vec<String> = counts.iter().map(usize::to_string).collect();
    let mut footer = format!("# selected {} per_class {}\n", selected.len(), counts_text.join(" "));
    if let Some(truth) = target.shadow_labels() {
        if let Some(acc) = selected.pseudo_label_accuracy(truth) {
            footer.push_str(&format!("# oracle_pseudo_acc {acc}\n"));
        }
    }
    out.push_str(&footer);
    ensure_dir(&cfg.out)?;
    write_file(&cfg.out.join("selection.csv"), out.as_bytes())?;
    stdout.write_all(footer.as_bytes())?;
    Ok(())
}

fn load_eval(cfg: &RunConfig, class_count: usize) -> Result<DomainSet, CliError> {
    Ok(load_csv(cfg.eval_path(), DomainTag::Target, class_count)?)
}

pub fn eval_anytime_cmd(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    let net = load_checkpoint(cfg.checkpoint_path())?;
    let eval = load_eval(cfg, net.class_count())?;
    let curve = eval_anytime(&net, &eval)?;
    let mut buf = Vec::new();
    write_anytime_csv(&curve, &mut buf)?;
    ensure_dir(&cfg.out)?;
    write_file(&cfg.out.join("anytime.csv"), &buf)?;
    stdout.write_all(&buf)?;
    Ok(())
}

pub fn eval_budget_cmd(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<(), CliError> {
    if cfg.budgets.is_empty() {
        return Err(CliError::Usage("eval-budget needs --budgets a,b,c".into()));
    }
    let net = load_checkpoint(cfg.checkpoint_path())?;
    let eval = load_eval(cfg, net.class_count())?;
    let val = load_csv(cfg.val_path(), DomainTag::Target, net.class_count())?;
    let points = eval_budget_curve(&net, &val, &eval, &cfg.budgets)?;
    let mut buf = Vec::new();
    write_budget_csv(&points, net.exit_count(), &mut buf)?;
    ensure_dir(&cfg.out)?;
    write_file(&cfg.out.join("budget_curve.csv"), &buf)?;
    stdout.write_all(&buf)?;
    Ok(())
}
