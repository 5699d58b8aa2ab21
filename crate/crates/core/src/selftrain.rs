//! Cross-exit pseudo-labeling for the target domain.
//!
//! For target sample `j` with exit distributions `f_1..f_K` and their mean
//! `p̄_j = (1/K) Σ_k f_k`, the confidence score is
//!
//! ```text
//! v_j = max(p̄_j) · Σ_k cos(f_k, p̄_j)
//! ```
//!
//! High agreement between exits pushes the cosine sum towards `K`, and the
//! `max(p̄_j)` factor keeps flat predictions from scoring high just because
//! every exit is equally unsure. The pseudo-label is `argmax p̄_j`.
//!
//! Selection is class-balanced. The mean score per pseudo-class `e_c` sets a
//! real-valued cap `λ_c = N_t · μ · e_c / Σ_i e_i`, then samples are admitted
//! greedily in descending score order while `|U_c| < λ_c`. Admitted samples
//! are spread over the exits uniformly at random, so each exit self-trains on
//! a different subset.

use rand::Rng;

use crate::adversarial::LossOutput;
use crate::cascade::{ForwardPass, MultiExitNet, NetGrads};
use crate::error::{Error, Result};
use crate::numerics::{argmax, cosine_similarity, cross_entropy, Matrix};

/// Per-sample predictions of every exit plus derived pseudo-labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPanel {
    exit_probs: Vec<Matrix>,
    mean_pred: Matrix,
    pseudo_label: Vec<usize>,
    confidence: Vec<f64>,
}

impl PredictionPanel {
    /// Builds a panel from one `N × C` probability matrix per exit.
    pub fn new(exit_probs: Vec<Matrix>) -> Result<Self> {
        let first = exit_probs
            .first()
            .ok_or_else(|| Error::Degenerate("a panel needs at least one exit".into()))?;
        let shape = first.shape();
        if shape.1 == 0 {
            return Err(Error::Degenerate("a panel needs at least one class".into()));
        }
        for p in &exit_probs {
            if p.shape() != shape {
                return Err(Error::dims("PredictionPanel::new", shape, p.shape()));
            }
            for (i, row) in p.iter_rows().enumerate() {
                let sum: f64 = row.iter().sum();
                if row.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::Degenerate(format!("row {i} is not a probability distribution")));
                }
            }
        }
        let k = exit_probs.len() as f64;
        let mut mean_pred = Matrix::zeros(shape.0, shape.1);
        for p in &exit_probs {
            mean_pred.add_scaled(p, 1.0)?;
        }
        let mean_pred = mean_pred.scale(1.0 / k);
        let pseudo_label = (0..shape.0).map(|i| mean_pred.argmax_row(i)).collect();
        let mut panel = PredictionPanel {
            exit_probs,
            mean_pred,
            pseudo_label,
            confidence: Vec::new(),
        };
        panel.confidence = confidence_scores(&panel);
        Ok(panel)
    }

    pub fn from_pass(pass: &ForwardPass) -> Result<Self> {
        PredictionPanel::new(pass.probs.clone())
    }

    /// Forwards `features` through `net` and builds the panel.
    pub fn evaluate(net: &MultiExitNet, features: &Matrix) -> Result<Self> {
        PredictionPanel::from_pass(&net.forward_all(features)?)
    }

    pub fn len(&self) -> usize {
        self.mean_pred.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn exit_count(&self) -> usize {
        self.exit_probs.len()
    }

    pub fn class_count(&self) -> usize {
        self.mean_pred.cols()
    }

    /// `N × C` distribution of exit `exit` (1-based).
    pub fn exit_probs(&self, exit: usize) -> &Matrix {
        &self.exit_probs[exit - 1]
    }

    /// The `K` exit distributions of sample `j`.
    pub fn sample_grid(&self, j: usize) -> Vec<&[f64]> {
        self.exit_probs.iter().map(|p| p.row(j)).collect()
    }

    pub fn mean_pred(&self) -> &Matrix {
        &self.mean_pred
    }

    pub fn pseudo_labels(&self) -> &[usize] {
        &self.pseudo_label
    }

    pub fn confidence(&self) -> &[f64] {
        &self.confidence
    }

    /// `max(p̄_j)` for every sample.
    pub fn mean_max(&self) -> Vec<f64> {
        self.mean_pred
            .iter_rows()
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

/// `v_j = max(p̄_j) · Σ_k cos(f_k(x_j), p̄_j)` for every sample.
pub fn confidence_scores(panel: &PredictionPanel) -> Vec<f64> {
    (0..panel.len())
        .map(|j| {
            let mean = panel.mean_pred.row(j);
            let peak = mean[argmax(mean)];
            let agreement: f64 = panel
                .exit_probs
                .iter()
                .map(|p| cosine_similarity(p.row(j), mean).expect("probability rows have nonzero norm"))
                .sum();
            peak * agreement
        })
        .collect()
}

/// Mean confidence per pseudo-class; classes nobody was assigned to get 0.
pub fn class_confidence(panel: &PredictionPanel) -> Vec<f64> {
    let c = panel.class_count();
    let mut sum = vec![0.0; c];
    let mut count = vec![0usize; c];
    for (&label, &v) in panel.pseudo_label.iter().zip(&panel.confidence) {
        sum[label] += v;
        count[label] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect()
}

/// `λ_c = n_target · mu · e_c / Σ_i e_i`.
pub fn class_thresholds(class_conf: &[f64], n_target: usize, mu: f64) -> Result<Vec<f64>> {
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(Error::config("mu", "must lie in (0, 1]"));
    }
    let total: f64 = class_conf.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("every class-wise confidence is zero".into()));
    }
    Ok(class_conf
        .iter()
        .map(|&e| n_target as f64 * mu * e / total)
        .collect())
}

/// How a [`SelfTrainSet`] was chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum SelectionRule {
    /// Greedy per-class caps `λ_c`.
    Balanced { caps: Vec<f64> },
    /// `max(p̄) > tau`, no balancing.
    Threshold { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfTrainEntry {
    pub sample_index: usize,
    pub pseudo_label: usize,
    pub confidence: f64,
    /// 1-based exit this entry trains, once assigned.
    pub assigned_exit: Option<usize>,
}

/// Pseudo-labeled target samples chosen for self-training, in admission order.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfTrainSet {
    pub entries: Vec<SelfTrainEntry>,
    pub rule: SelectionRule,
}

impl SelfTrainSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn per_class_counts(&self, class_count: usize) -> Vec<usize> {
        let mut counts = vec![0; class_count];
        for e in &self.entries {
            counts[e.pseudo_label] += 1;
        }
        counts
    }

    /// Caps of a balanced selection, empty for threshold selection.
    pub fn caps(&self) -> &[f64] {
        match &self.rule {
            SelectionRule::Balanced { caps } => caps,
            SelectionRule::Threshold { .. } => &[],
        }
    }

    /// Fraction of entries whose pseudo-label equals `truth[sample_index]`.
    pub fn pseudo_label_accuracy(&self, truth: &[usize]) -> Option<f64> {
        if self.is_empty() {
            return None;
        }
        let hits = self
            .entries
            .iter()
            .filter(|e| truth[e.sample_index] == e.pseudo_label)
            .count();
        Some(hits as f64 / self.len() as f64)
    }

    pub fn contains(&self, sample_index: usize) -> bool {
        self.entries.iter().any(|e| e.sample_index == sample_index)
    }

    /// Keeps the first `n` entries in admission order.
    pub fn truncated(&self, n: usize) -> SelfTrainSet {
        SelfTrainSet {
            entries: self.entries.iter().take(n).copied().collect(),
            rule: self.rule.clone(),
        }
    }
}

/// Sample indices by descending `score`, ascending index on ties.
fn ranked(score: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    order
}

/// Greedy class-balanced admission: walk samples by descending confidence and
/// take sample `j` with pseudo-label `c` iff `|U_c| < λ_c`.
pub fn select_balanced(panel: &PredictionPanel, caps: &[f64]) -> Result<SelfTrainSet> {
    if caps.len() != panel.class_count() {
        return Err(Error::dims(
            "select_balanced",
            (1, panel.class_count()),
            (1, caps.len()),
        ));
    }
    let mut taken = vec![0usize; caps.len()];
    let mut entries = Vec::new();
    for j in ranked(&panel.confidence) {
        let c = panel.pseudo_label[j];
        if (taken[c] as f64) < caps[c] {
            taken[c] += 1;
            entries.push(SelfTrainEntry {
                sample_index: j,
                pseudo_label: c,
                confidence: panel.confidence[j],
                assigned_exit: None,
            });
        }
    }
    Ok(SelfTrainSet {
        entries,
        rule: SelectionRule::Balanced { caps: caps.to_vec() },
    })
}

/// Class confidences, caps and balanced selection in one go.
pub fn select_confident(panel: &PredictionPanel, mu: f64) -> Result<SelfTrainSet> {
    let caps = class_thresholds(&class_confidence(panel), panel.len(), mu)?;
    select_balanced(panel, &caps)
}

/// Baseline: every sample with `max(p̄) > tau`, ordered by `max(p̄)`.
pub fn select_by_threshold(panel: &PredictionPanel, tau: f64) -> Result<SelfTrainSet> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::config("tau", "must lie in (0, 1)"));
    }
    let peak = panel.mean_max();
    let entries = ranked(&peak)
        .into_iter()
        .filter(|&j| peak[j] > tau)
        .map(|j| SelfTrainEntry {
            sample_index: j,
            pseudo_label: panel.pseudo_label[j],
            confidence: panel.confidence[j],
            assigned_exit: None,
        })
        .collect();
    Ok(SelfTrainSet {
        entries,
        rule: SelectionRule::Threshold { tau },
    })
}

/// Draws each entry's exit independently and uniformly from `1..=exit_count`.
pub fn assign_exits<R: Rng + ?Sized>(set: &SelfTrainSet, exit_count: usize, rng: &mut R) -> Result<SelfTrainSet> {
    if exit_count == 0 {
        return Err(Error::config("exit_count", "must be at least 1"));
    }
    let mut out = set.clone();
    for e in &mut out.entries {
        e.assigned_exit = Some(rng.random_range(1..=exit_count));
    }
    Ok(out)
}

/// Mean cross-entropy of each entry's assigned exit against its pseudo-label.
///
/// Entry `j` only sends gradient into head `k_j` and trunk blocks `1..=k_j`.
pub fn target_loss(net: &MultiExitNet, entries: &[SelfTrainEntry], target_features: &Matrix) -> Result<LossOutput> {
    let k = net.exit_count();
    let mut grads = NetGrads::zeros(net);
    let mut per_exit = vec![0.0; k];
    if entries.is_empty() {
        return Ok(LossOutput {
            loss: 0.0,
            per_exit,
            grads,
        });
    }
    let mut exits = Vec::with_capacity(entries.len());
    for e in entries {
        let exit = e
            .assigned_exit
            .ok_or_else(|| Error::State(format!("sample {} has no assigned exit", e.sample_index)))?;
        if exit == 0 || exit > k {
            return Err(Error::Index {
                what: "exit",
                index: exit,
                limit: k,
            });
        }
        if e.sample_index >= target_features.rows() {
            return Err(Error::Index {
                what: "target sample",
                index: e.sample_index,
                limit: target_features.rows(),
            });
        }
        exits.push(exit - 1);
    }
    let rows: Vec<usize> = entries.iter().map(|e| e.sample_index).collect();
    let pass = net.forward_all(&target_features.select_rows(&rows))?;
    let n = entries.len() as f64;
    let mut logit_grads: Vec<Option<Matrix>> = vec![None; k];
    for exit in 0..k {
        let members: Vec<usize> = (0..entries.len()).filter(|&i| exits[i] == exit).collect();
        if members.is_empty() {
            continue;
        }
        let probs = pass.probs[exit].select_rows(&members);
        let labels: Vec<usize> = members.iter().map(|&i| entries[i].pseudo_label).collect();
        let (mean_ce, g) = cross_entropy(&probs, &labels)?;
        // cross_entropy averages over its own rows; rescale to the whole batch
        let share = members.len() as f64 / n;
        per_exit[exit] = mean_ce * share;
        let mut full = Matrix::zeros(entries.len(), net.class_count());
        for (r, &i) in members.iter().enumerate() {
            for (dst, src) in full.row_mut(i).iter_mut().zip(g.row(r)) {
                *dst = src * share;
            }
        }
        logit_grads[exit] = Some(full);
    }
    net.backward(&pass, &logit_grads, &vec![None; k], &mut grads)?;
    Ok(LossOutput {
        loss: per_exit.iter().sum(),
        per_exit,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::CascadeConfig;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn panel(exits: &[&[&[f64]]]) -> PredictionPanel {
        PredictionPanel::new(exits.iter().map(|rows| Matrix::from_rows(rows).unwrap()).collect()).unwrap()
    }

    /// Panel whose mean prediction has the given confidence ordering and
    /// labels; every exit is identical so `v = K · max(p̄)`.
    fn scripted(peaks: &[f64], labels: &[usize], k: usize) -> PredictionPanel {
        let rows: Vec<Vec<f64>> = peaks
            .iter()
            .zip(labels)
            .map(|(&p, &l)| if l == 0 { vec![p, 1.0 - p] } else { vec![1.0 - p, p] })
            .collect();
        PredictionPanel::new(vec![Matrix::from_rows(&rows).unwrap(); k]).unwrap()
    }

    #[test]
    fn one_hot_agreement_scores_k() {
        let p = panel(&[&[&[1.0, 0.0]], &[&[1.0, 0.0]]]);
        assert_eq!(p.confidence(), &[2.0]);
        assert_eq!(p.pseudo_labels(), &[0]);
    }

    #[test]
    fn uniform_exits_are_penalized_by_peak() {
        let p = panel(&[&[&[0.5, 0.5]], &[&[0.5, 0.5]], &[&[0.5, 0.5]]]);
        assert!((p.confidence()[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn disagreeing_exits_score_low() {
        let p = panel(&[&[&[0.9, 0.1]], &[&[0.1, 0.9]]]);
        // p̄ = (0.5, 0.5); cos((0.9,0.1),(0.5,0.5)) = 0.5/(√0.82·√0.5) for both exits
        let cos = 0.5 / (0.82f64.sqrt() * 0.5f64.sqrt());
        let want = 0.5 * 2.0 * cos;
        assert!((p.confidence()[0] - want).abs() < 1e-15);
        assert!((p.confidence()[0] - 0.781).abs() < 1e-3);
        // tie in p̄ breaks to the lowest class
        assert_eq!(p.pseudo_labels(), &[0]);
    }

    #[test]
    fn invalid_rows_are_rejected() {
        assert!(PredictionPanel::new(vec![Matrix::row_vector(&[0.7, 0.7])]).is_err());
        assert!(PredictionPanel::new(vec![]).is_err());
        assert!(PredictionPanel::new(vec![Matrix::row_vector(&[1.0, 0.0]), Matrix::row_vector(&[1.0])]).is_err());
    }

    #[test]
    fn class_confidence_is_a_group_mean() {
        let p = panel(&[&[&[1.0, 0.0], &[0.75, 0.25]], &[&[1.0, 0.0], &[0.75, 0.25]]]);
        // v = 2.0 and 2·0.75 = 1.5, both class 0
        let e = class_confidence(&p);
        assert!((e[0] - 1.75).abs() < 1e-15);
        assert_eq!(e[1], 0.0);
    }

    #[test]
    fn class_confidence_matches_independent_group_by() {
        let mut rng = seed::stream(5, "test", 0);
        let net = MultiExitNet::new(
            CascadeConfig {
                class_count: 4,
                ..CascadeConfig::default()
            },
            3,
        )
        .unwrap();
        let x = Matrix::new(60, 2, (0..120).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let p = PredictionPanel::evaluate(&net, &x).unwrap();
        let e = class_confidence(&p);
        for c in 0..4 {
            let group: Vec<f64> = (0..60)
                .filter(|&j| p.pseudo_labels()[j] == c)
                .map(|j| p.confidence()[j])
                .collect();
            let want = if group.is_empty() { 0.0 } else { group.iter().sum::<f64>() / group.len() as f64 };
            assert!((e[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn thresholds_scale_with_class_confidence() {
        assert_eq!(class_thresholds(&[0.5, 0.5], 100, 0.8).unwrap(), vec![40.0, 40.0]);
        let l = class_thresholds(&[0.6, 0.2], 100, 0.8).unwrap();
        assert!((l[0] - 60.0).abs() < 1e-12 && (l[1] - 20.0).abs() < 1e-12);
        assert!(matches!(class_thresholds(&[0.0, 0.0], 100, 0.8), Err(Error::Degenerate(_))));
        assert!(class_thresholds(&[1.0], 10, 0.0).is_err());
        assert!(class_thresholds(&[1.0], 10, 1.5).is_err());
    }

    #[test]
    fn zero_caps_select_nothing() {
        let p = scripted(&[0.9, 0.8], &[0, 1], 2);
        assert!(select_balanced(&p, &[0.0, 0.0]).unwrap().is_empty());
    }

    #[test]
    fn greedy_takes_best_of_each_class() {
        let p = scripted(&[0.9, 0.8, 0.7, 0.6], &[0, 0, 1, 1], 2);
        let set = select_balanced(&p, &[1.0, 1.0]).unwrap();
        let picked: Vec<usize> = set.entries.iter().map(|e| e.sample_index).collect();
        // samples 1 and 3 in 1-based numbering
        assert_eq!(picked, vec![0, 2]);
    }

    #[test]
    fn fractional_caps_round_up() {
        let p = scripted(&[0.9, 0.85, 0.8, 0.75, 0.7], &[0, 0, 0, 1, 1], 2);
        let set = select_balanced(&p, &[1.2, 0.5]).unwrap();
        assert_eq!(set.per_class_counts(2), vec![2, 1]);
    }

    #[test]
    fn single_exit_assignment_is_exit_one() {
        let p = scripted(&[0.9, 0.8, 0.7], &[0, 1, 0], 1);
        let set = select_confident(&p, 1.0).unwrap();
        let set = assign_exits(&set, 1, &mut seed::stream(0, seed::TAG_ASSIGN, 0)).unwrap();
        assert!(set.entries.iter().all(|e| e.assigned_exit == Some(1)));
    }

    #[test]
    fn assignment_is_deterministic_and_roughly_uniform() {
        let base = SelfTrainSet {
            entries: (0..10_000)
                .map(|i| SelfTrainEntry {
                    sample_index: i,
                    pseudo_label: 0,
                    confidence: 1.0,
                    assigned_exit: None,
                })
                .collect(),
            rule: SelectionRule::Threshold { tau: 0.5 },
        };
        let a = assign_exits(&base, 5, &mut seed::stream(9, seed::TAG_ASSIGN, 0)).unwrap();
        let b = assign_exits(&base, 5, &mut seed::stream(9, seed::TAG_ASSIGN, 0)).unwrap();
        assert_eq!(a, b);
        for k in 1..=5 {
            let n = a.entries.iter().filter(|e| e.assigned_exit == Some(k)).count();
            assert!((1800..=2200).contains(&n), "exit {k}: {n}");
        }
    }

    #[test]
    fn threshold_selection_on_uniform_panel_is_empty() {
        let p = panel(&[&[&[0.5, 0.5], &[0.5, 0.5]]]);
        assert!(select_by_threshold(&p, 0.99).unwrap().is_empty());
        assert!(select_by_threshold(&p, 1.0).is_err());
        assert!(select_by_threshold(&p, 0.0).is_err());
    }

    #[test]
    fn threshold_membership_matches_predicate() {
        let mut rng = seed::stream(2, "test", 0);
        let net = MultiExitNet::new(CascadeConfig::default(), 8).unwrap();
        let x = Matrix::new(200, 2, (0..400).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let p = PredictionPanel::evaluate(&net, &x).unwrap();
        for tau in [0.6, 0.7, 0.8, 0.9] {
            let set = select_by_threshold(&p, tau).unwrap();
            for j in 0..p.len() {
                let peak = p.mean_pred().row(j).iter().copied().fold(0.0, f64::max);
                assert_eq!(set.contains(j), peak > tau);
            }
            assert!(set.entries.iter().all(|e| e.pseudo_label == p.pseudo_labels()[e.sample_index]));
        }
    }

    fn small_net(seed: u64) -> MultiExitNet {
        MultiExitNet::new(
            CascadeConfig {
                input_dim: 2,
                exit_count: 3,
                hidden_width: 6,
                disc_width: 4,
                class_count: 3,
            },
            seed,
        )
        .unwrap()
    }

    fn entry(sample_index: usize, pseudo_label: usize, exit: usize) -> SelfTrainEntry {
        SelfTrainEntry {
            sample_index,
            pseudo_label,
            confidence: 1.0,
            assigned_exit: Some(exit),
        }
    }

    #[test]
    fn empty_target_batch_has_zero_loss() {
        let net = small_net(1);
        let out = target_loss(&net, &[], &Matrix::zeros(3, 2)).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.is_zero());
    }

    #[test]
    fn unassigned_entry_is_a_state_error() {
        let net = small_net(1);
        let mut e = entry(0, 0, 1);
        e.assigned_exit = None;
        assert!(matches!(target_loss(&net, &[e], &Matrix::zeros(1, 2)), Err(Error::State(_))));
    }

    #[test]
    fn target_loss_is_the_per_entry_mean() {
        let net = small_net(4);
        let mut rng = seed::stream(4, "test", 0);
        let x = Matrix::new(8, 2, (0..16).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let entries = [entry(0, 1, 1), entry(3, 0, 3), entry(5, 2, 2), entry(3, 2, 1), entry(7, 1, 3)];
        let out = target_loss(&net, &entries, &x).unwrap();
        let mut want = 0.0;
        for e in &entries {
            let p = net.forward_to_exit(x.row(e.sample_index), e.assigned_exit.unwrap()).unwrap();
            want -= p.probs[e.pseudo_label].ln();
        }
        want /= entries.len() as f64;
        assert!((out.loss - want).abs() < 1e-12);
    }

    #[test]
    fn target_loss_routes_only_to_assigned_exit() {
        let mut net = small_net(6);
        // make exit 1 confidently right for class 0
        net.heads[0] = crate::numerics::DenseLayer::from_parts(Matrix::zeros(6, 3), vec![1000.0, 0.0, 0.0]).unwrap();
        let x = Matrix::row_vector(&[0.3, -0.2]);
        let out = target_loss(&net, &[entry(0, 0, 1)], &x).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.heads.iter().all(|g| g.is_zero()));
        assert!(out.grads.trunk.iter().all(|g| g.is_zero()));

        let out = target_loss(&net, &[entry(0, 1, 2)], &x).unwrap();
        assert!(out.grads.heads[0].is_zero() && out.grads.heads[2].is_zero());
        assert!(!out.grads.heads[1].is_zero());
        assert!(out.grads.trunk[2].is_zero());
        assert!(out.grads.disc_hidden.iter().all(|g| g.is_zero()));
    }

    #[test]
    fn ablating_an_entry_changes_only_its_head() {
        let net = small_net(9);
        let mut rng = seed::stream(9, "test", 0);
        let x = Matrix::new(6, 2, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let entries = [entry(0, 1, 1), entry(1, 0, 2), entry(2, 2, 2), entry(4, 1, 3)];
        for drop in 0..entries.len() {
            // batch sizes differ, so compare gradients times batch size
            let kept: Vec<SelfTrainEntry> = entries.iter().enumerate().filter(|(i, _)| *i != drop).map(|(_, e)| *e).collect();
            let full = target_loss(&net, &entries, &x).unwrap();
            let part = target_loss(&net, &kept, &x).unwrap();
            let dropped_exit = entries[drop].assigned_exit.unwrap() - 1;
            let (n_full, n_part) = (entries.len() as f64, kept.len() as f64);
            for h in 0..3 {
                if h == dropped_exit {
                    continue;
                }
                let a = full.grads.heads[h].weights.scale(n_full);
                let b = part.grads.heads[h].weights.scale(n_part);
                for (u, v) in a.data().iter().zip(b.data()) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }

    /// Independent brute-force greedy: recomputes p̄, v, e_c and λ_c from raw
    /// probabilities with plain loops and repeatedly picks the best remaining
    /// admissible sample.
    fn brute_force_select(raw: &[Vec<Vec<f64>>], mu: f64) -> Vec<usize> {
        let n = raw.len();
        let k = raw[0].len();
        let c = raw[0][0].len();
        let mut v = vec![0.0; n];
        let mut label = vec![0; n];
        for j in 0..n {
            let mut mean = vec![0.0; c];
            for e in 0..k {
                for i in 0..c {
                    mean[i] += raw[j][e][i];
                }
            }
            for m in &mut mean {
                *m /= k as f64;
            }
            let mut best = 0;
            for i in 1..c {
                if mean[i] > mean[best] {
                    best = i;
                }
            }
            label[j] = best;
            let norm_m = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut s = 0.0;
            for e in 0..k {
                let dot: f64 = (0..c).map(|i| raw[j][e][i] * mean[i]).sum();
                let norm_e = raw[j][e].iter().map(|x| x * x).sum::<f64>().sqrt();
                s += (dot / (norm_e * norm_m)).min(1.0);
            }
            v[j] = mean[best] * s;
        }
        let mut e_sum = vec![0.0; c];
        let mut e_cnt = vec![0.0; c];
        for j in 0..n {
            e_sum[label[j]] += v[j];
            e_cnt[label[j]] += 1.0;
        }
        let e: Vec<f64> = (0..c).map(|i| if e_cnt[i] > 0.0 { e_sum[i] / e_cnt[i] } else { 0.0 }).collect();
        let total: f64 = e.iter().sum();
        let lambda: Vec<f64> = e.iter().map(|x| n as f64 * mu * x / total).collect();
        let mut used = vec![false; n];
        let mut size = vec![0.0; c];
        let mut picked = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                if let Some(b) = best {
                    if v[j] > v[b] {
                        best = Some(j);
                    }
                } else {
                    best = Some(j);
                }
            }
            let Some(j) = best else { break };
            used[j] = true;
            if size[label[j]] < lambda[label[j]] {
                size[label[j]] += 1.0;
                picked.push(j);
            }
        }
        picked
    }

    #[test]
    fn balanced_selection_matches_brute_force() {
        for s in 0..100u64 {
            let mut rng = seed::stream(s, "oracle", 0);
            let n = rng.random_range(1..=200);
            let k = rng.random_range(1..=5);
            let c = rng.random_range(2..=5);
            let raw: Vec<Vec<Vec<f64>>> = (0..n)
                .map(|_| {
                    (0..k)
                        .map(|_| {
                            let w: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0f64).powi(3)).collect();
                            let t: f64 = w.iter().sum();
                            w.iter().map(|x| x / t).collect()
                        })
                        .collect()
                })
                .collect();
            let mu = rng.random_range(0.05..=1.0);
            let exits: Vec<Matrix> = (0..k)
                .map(|e| Matrix::from_rows(&raw.iter().map(|r| r[e].clone()).collect::<Vec<_>>()).unwrap())
                .collect();
            let p = PredictionPanel::new(exits).unwrap();
            let got: Vec<usize> = select_confident(&p, mu).unwrap().entries.iter().map(|e| e.sample_index).collect();
            let mut want = brute_force_select(&raw, mu);
            let mut got_sorted = got.clone();
            got_sorted.sort_unstable();
            want.sort_unstable();
            assert_eq!(got_sorted, want, "seed {s}");
        }
    }

    fn random_panel(seed: u64, n: usize, k: usize, c: usize) -> PredictionPanel {
        let mut rng = seed::stream(seed, "panel", 0);
        let exits = (0..k)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        let w: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0f64).powi(4) + 1e-9).collect();
                        let t: f64 = w.iter().sum();
                        w.iter().map(|x| x / t).collect()
                    })
                    .collect();
                Matrix::from_rows(&rows).unwrap()
            })
            .collect();
        PredictionPanel::new(exits).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn confidence_lies_in_zero_k(seed in 0u64..10_000, n in 1usize..30, k in 1usize..6, c in 2usize..6) {
            let p = random_panel(seed, n, k, c);
            for &v in p.confidence() {
                prop_assert!(v > 0.0 && v <= k as f64);
            }
            for row in p.mean_pred().iter_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }

        #[test]
        fn confidence_ignores_exit_order(seed in 0u64..10_000, n in 1usize..20, k in 2usize..6) {
            let p = random_panel(seed, n, k, 3);
            let mut exits: Vec<Matrix> = (1..=k).map(|e| p.exit_probs(e).clone()).collect();
            exits.reverse();
            let q = PredictionPanel::new(exits).unwrap();
            for (a, b) in p.confidence().iter().zip(q.confidence()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn caps_sum_and_bound_selection(seed in 0u64..10_000, n in 1usize..150, k in 1usize..5, c in 2usize..5, mu in 0.01f64..=1.0) {
            let p = random_panel(seed, n, k, c);
            let caps = class_thresholds(&class_confidence(&p), n, mu).unwrap();
            prop_assert!((caps.iter().sum::<f64>() - mu * n as f64).abs() < 1e-9);
            let set = select_balanced(&p, &caps).unwrap();
            for (count, cap) in set.per_class_counts(c).iter().zip(&caps) {
                prop_assert!(*count as f64 <= cap.ceil());
            }
            prop_assert!(set.len() as f64 <= (mu * n as f64).ceil() + c as f64);
        }

        #[test]
        fn selection_is_monotone_in_mu(seed in 0u64..10_000, n in 1usize..120, a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let p = random_panel(seed, n, 3, 3);
            let small = select_confident(&p, lo).unwrap();
            let large = select_confident(&p, hi).unwrap();
            for e in &small.entries {
                prop_assert!(large.contains(e.sample_index));
            }
        }
    }

    #[test]
    fn identical_one_hot_exits_reach_k_exactly_and_only_then() {
        let p = panel(&[&[&[0.0, 1.0, 0.0]], &[&[0.0, 1.0, 0.0]], &[&[0.0, 1.0, 0.0]]]);
        assert_eq!(p.confidence()[0], 3.0);
        let q = panel(&[&[&[0.0, 1.0, 0.0]], &[&[0.0, 1.0, 0.0]], &[&[0.0, 0.999, 0.001]]]);
        assert!(q.confidence()[0] < 3.0);
    }

}
