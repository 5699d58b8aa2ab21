//! Anytime and budgeted evaluation.
//!
//! Anytime evaluation reads every exit on every sample and reports each
//! exit's accuracy next to its cumulative cost. Budgeted evaluation stops a
//! sample at the first exit `k < K` whose top softmax probability exceeds a
//! shared threshold. The threshold is calibrated from cost alone on a
//! validation set, so labels there are optional and only used for reporting.

use std::io::{self, Write};

use crate::cascade::MultiExitNet;
use crate::dataset::DomainSet;
use crate::error::{Error, Result};
use crate::numerics::{argmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnytimePoint {
    /// 1-based.
    pub exit: usize,
    pub accuracy: f64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnytimeCurve {
    pub points: Vec<AnytimePoint>,
}

/// Accuracy of every exit's argmax over `set`, paired with the cost of
/// reaching that exit.
pub fn eval_anytime(net: &MultiExitNet, set: &DomainSet) -> Result<AnytimeCurve> {
    let labels = set.eval_labels()?;
    let table = ExitTable::build(net, set.features())?;
    let prefix = net.cost_model().prefix_sums();
    let points = (0..net.exit_count())
        .map(|k| AnytimePoint {
            exit: k + 1,
            accuracy: table.exit_accuracy(k, &labels),
            macs: prefix[k],
        })
        .collect();
    Ok(AnytimeCurve { points })
}

/// Outcome of early-exit inference on one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DynamicExit {
    pub prediction: usize,
    /// 1-based exit that produced the prediction.
    pub exit: usize,
    pub macs: u64,
}

/// Evaluates exits in order and stops at the first one whose top probability
/// is strictly above `threshold`; the last exit always answers.
pub fn dynamic_forward(net: &MultiExitNet, sample: &[f64], threshold: f64) -> Result<DynamicExit> {
    let k = net.exit_count();
    let mut walk = net.exit_walk(sample)?;
    loop {
        let probs = walk.advance()?;
        let top = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if walk.depth() == k || top > threshold {
            return Ok(DynamicExit {
                prediction: argmax(&probs),
                exit: walk.depth(),
                macs: walk.macs(),
            });
        }
    }
}

/// Behaviour of one threshold on one set.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetProfile {
    pub threshold: f64,
    pub expected_macs: f64,
    /// Share of samples leaving at each exit.
    pub exit_fractions: Vec<f64>,
    /// `None` when the set carries no labels.
    pub accuracy: Option<f64>,
}

/// Top probability and argmax of every exit for every sample, computed once.
struct ExitTable {
    top: Vec<Vec<f64>>,
    pred: Vec<Vec<usize>>,
}

impl ExitTable {
    fn build(net: &MultiExitNet, features: &Matrix) -> Result<Self> {
        let pass = net.forward_all(features)?;
        let mut top = Vec::with_capacity(pass.probs.len());
        let mut pred = Vec::with_capacity(pass.probs.len());
        for p in &pass.probs {
            top.push(
                p.iter_rows()
                    .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .collect(),
            );
            pred.push((0..p.rows()).map(|i| p.argmax_row(i)).collect());
        }
        Ok(ExitTable { top, pred })
    }

    fn len(&self) -> usize {
        self.top.first().map_or(0, Vec::len)
    }

    fn exit_accuracy(&self, k: usize, labels: &[usize]) -> f64 {
        let hits = self.pred[k].iter().zip(labels).filter(|(p, y)| p == y).count();
        hits as f64 / labels.len() as f64
    }

    /// 0-based exit taken by sample `j`.
    fn exit_of(&self, j: usize, threshold: f64) -> usize {
        let last = self.top.len() - 1;
        (0..last).find(|&k| self.top[k][j] > threshold).unwrap_or(last)
    }

    fn profile(&self, threshold: f64, prefix: &[u64], labels: Option<&[usize]>) -> BudgetProfile {
        let n = self.len();
        let mut counts = vec![0usize; self.top.len()];
        let mut hits = 0usize;
        for j in 0..n {
            let k = self.exit_of(j, threshold);
            counts[k] += 1;
            if labels.is_some_and(|y| self.pred[k][j] == y[j]) {
                hits += 1;
            }
        }
        let exit_fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let expected_macs = exit_fractions.iter().zip(prefix).map(|(f, &m)| f * m as f64).sum();
        BudgetProfile {
            threshold,
            expected_macs,
            exit_fractions,
            accuracy: labels.map(|_| hits as f64 / n as f64),
        }
    }
}

fn optional_labels(set: &DomainSet) -> Result<Option<Vec<usize>>> {
    if set.has_eval_labels() {
        set.eval_labels().map(Some)
    } else {
        Ok(None)
    }
}

/// Applies one threshold to every sample of `set`.
pub fn evaluate_threshold(net: &MultiExitNet, set: &DomainSet, threshold: f64) -> Result<BudgetProfile> {
    if set.is_empty() {
        return Err(Error::EmptyDomain("evaluation set has no rows".into()));
    }
    let table = ExitTable::build(net, set.features())?;
    let labels = optional_labels(set)?;
    Ok(table.profile(threshold, &net.cost_model().prefix_sums(), labels.as_deref()))
}

/// Picks the largest threshold whose expected cost on `validation` stays
/// within `budget_macs`.
///
/// Candidates are 0, 1 and every distinct top probability seen at exits
/// `1..K-1`; between two neighbouring candidates the routing cannot change.
/// Expected cost never decreases as the threshold grows, so the search is a
/// bisection over the sorted candidates.
pub fn calibrate_budget(net: &MultiExitNet, validation: &DomainSet, budget_macs: f64) -> Result<BudgetProfile> {
    if validation.is_empty() {
        return Err(Error::EmptyDomain("validation set has no rows".into()));
    }
    let prefix = net.cost_model().prefix_sums();
    if !(budget_macs >= prefix[0] as f64) {
        return Err(Error::Budget {
            budget: budget_macs,
            minimum: prefix[0],
        });
    }
    let table = ExitTable::build(net, validation.features())?;
    let labels = optional_labels(validation)?;
    let mut candidates: Vec<f64> = vec![0.0, 1.0];
    for k in 0..table.top.len() - 1 {
        candidates.extend(table.top[k].iter().copied().filter(|t| (0.0..=1.0).contains(t)));
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let feasible = candidates.partition_point(|&t| table.profile(t, &prefix, None).expected_macs <= budget_macs);
    // threshold 0 sends every sample out at exit 1, which the guard above admits
    let threshold = candidates[feasible.max(1) - 1];
    Ok(table.profile(threshold, &prefix, labels.as_deref()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetPoint {
    pub budget: f64,
    /// Calibrated on the validation set and then applied to the test set,
    /// which supplies the remaining fields.
    pub profile: BudgetProfile,
}

/// Calibrates each budget on `validation` and measures the resulting
/// threshold on `test`, which must carry labels.
pub fn eval_budget_curve(
    net: &MultiExitNet,
    validation: &DomainSet,
    test: &DomainSet,
    budgets: &[f64],
) -> Result<Vec<BudgetPoint>> {
    if budgets.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::config("budgets", "must be sorted ascending"));
    }
    let labels = test.eval_labels()?;
    let table = ExitTable::build(net, test.features())?;
    let prefix = net.cost_model().prefix_sums();
    budgets
        .iter()
        .map(|&budget| {
            let calibrated = calibrate_budget(net, validation, budget)?;
            Ok(BudgetPoint {
                budget,
                profile: table.profile(calibrated.threshold, &prefix, Some(&labels)),
            })
        })
        .collect()
}

/// `exit,accuracy,macs`
pub fn write_anytime_csv<W: Write>(curve: &AnytimeCurve, mut out: W) -> io::Result<()> {
    writeln!(out, "exit,accuracy,macs")?;
    for p in &curve.points {
        writeln!(out, "{},{},{}", p.exit, p.accuracy, p.macs)?;
    }
    Ok(())
}

/// `budget,threshold,expected_macs,accuracy,frac_exit_1..K`
pub fn write_budget_csv<W: Write>(points: &[BudgetPoint], exits: usize, mut out: W) -> io::Result<()> {
    let fracs: Vec<String> = (1..=exits).map(|k| format!("frac_exit_{k}")).collect();
    writeln!(out, "budget,threshold,expected_macs,accuracy,{}", fracs.join(","))?;
    for p in points {
        let f: Vec<String> = p.profile.exit_fractions.iter().map(f64::to_string).collect();
        let acc = p.profile.accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{}",
            p.budget,
            p.profile.threshold,
            p.profile.expected_macs,
            acc,
            f.join(",")
        )?;
    }
    Ok(())
}

fn csv_rows<'a>(text: &'a str, header_prefix: &str) -> Result<(Vec<&'a str>, Vec<(usize, Vec<&'a str>)>)> {
    let mut lines = text.lines().enumerate();
    let header: Vec<&str> = match lines.next() {
        Some((_, h)) if h.starts_with(header_prefix) => h.split(',').collect(),
        _ => return Err(Error::Format(format!("expected a header starting with `{header_prefix}`"))),
    };
    let mut rows = Vec::new();
    for (i, line) in lines.filter(|(_, l)| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected {} fields, found {}", header.len(), fields.len()),
            });
        }
        rows.push((i + 1, fields));
    }
    Ok((header, rows))
}

fn field<T: std::str::FromStr>(line: usize, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad value `{s}`"),
    })
}

pub fn parse_anytime_csv(text: &str) -> Result<AnytimeCurve> {
    let (_, rows) = csv_rows(text, "exit,accuracy,macs")?;
    let points = rows
        .into_iter()
        .map(|(line, f)| {
            Ok(AnytimePoint {
                exit: field(line, f[0])?,
                accuracy: field(line, f[1])?,
                macs: field(line, f[2])?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AnytimeCurve { points })
}

pub fn parse_budget_csv(text: &str) -> Result<Vec<BudgetPoint>> {
    let (_, rows) = csv_rows(text, "budget,threshold,expected_macs,accuracy")?;
    rows.into_iter()
        .map(|(line, f)| {
            Ok(BudgetPoint {
                budget: field(line, f[0])?,
                profile: BudgetProfile {
                    threshold: field(line, f[1])?,
                    expected_macs: field(line, f[2])?,
                    accuracy: if f[3].is_empty() { None } else { Some(field(line, f[3])?) },
                    exit_fractions: f[4..].iter().map(|v| field(line, v)).collect::<Result<_>>()?,
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::CascadeConfig;
    use crate::dataset::{gen_two_moons_shift, DomainTag};
    use crate::seed;
    use rand::Rng;

    fn net(k: usize, seed: u64) -> MultiExitNet {
        MultiExitNet::new(
            CascadeConfig {
                input_dim: 2,
                exit_count: k,
                hidden_width: 6,
                disc_width: 4,
                class_count: 3,
            },
            seed,
        )
        .unwrap()
    }

    fn labeled(n: usize, seed: u64) -> DomainSet {
        let mut rng = seed::stream(seed, "test", 0);
        let x = Matrix::new(n, 2, (0..2 * n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let y = (0..n).map(|_| rng.random_range(0..3)).collect();
        DomainSet::labeled(x, y, DomainTag::Target, 3).unwrap()
    }

    /// Routes every sample through `dynamic_forward` one at a time.
    fn simulate(net: &MultiExitNet, set: &DomainSet, t: f64) -> (Vec<f64>, f64, f64) {
        let k = net.exit_count();
        let labels = set.eval_labels().unwrap();
        let mut counts = vec![0usize; k];
        let mut macs = 0u64;
        let mut hits = 0;
        for j in 0..set.len() {
            let d = dynamic_forward(net, set.features().row(j), t).unwrap();
            counts[d.exit - 1] += 1;
            macs += d.macs;
            hits += usize::from(d.prediction == labels[j]);
        }
        let n = set.len() as f64;
        (
            counts.iter().map(|&c| c as f64 / n).collect(),
            macs as f64 / n,
            hits as f64 / n,
        )
    }

    #[test]
    fn untrained_net_is_near_chance_on_balanced_binary_data() {
        let (_, target) = gen_two_moons_shift(400, 0.0, 0.1, 1).unwrap();
        let n = MultiExitNet::zeros(CascadeConfig::default()).unwrap();
        // zero heads give uniform output and argmax picks class 0
        for p in eval_anytime(&n, &target).unwrap().points {
            assert!((p.accuracy - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn single_exit_curve_is_plain_accuracy() {
        let n = net(1, 2);
        let set = labeled(50, 2);
        let curve = eval_anytime(&n, &set).unwrap();
        assert_eq!(curve.points.len(), 1);
        let labels = set.eval_labels().unwrap();
        let hits = (0..50)
            .filter(|&j| argmax(&n.forward_to_exit(set.features().row(j), 1).unwrap().probs) == labels[j])
            .count();
        assert_eq!(curve.points[0].accuracy, hits as f64 / 50.0);
    }

    #[test]
    fn anytime_matches_per_sample_recount() {
        for s in 0..10 {
            let n = net(4, s);
            let set = labeled(40, s + 100);
            let labels = set.eval_labels().unwrap();
            let curve = eval_anytime(&n, &set).unwrap();
            assert_eq!(
                curve.points.iter().map(|p| p.macs).collect::<Vec<_>>(),
                n.cost_model().prefix_sums()
            );
            for p in &curve.points {
                let hits = (0..40)
                    .filter(|&j| argmax(&n.forward_to_exit(set.features().row(j), p.exit).unwrap().probs) == labels[j])
                    .count();
                assert_eq!(p.accuracy, hits as f64 / 40.0);
            }
            assert!(curve.points.windows(2).all(|w| w[0].macs < w[1].macs));
        }
    }

    #[test]
    fn anytime_needs_labels() {
        let (_, target) = gen_two_moons_shift(20, 0.0, 0.1, 1).unwrap();
        let hidden = DomainSet::unlabeled(target.features().clone(), 2).unwrap();
        assert!(matches!(
            eval_anytime(&MultiExitNet::zeros(CascadeConfig::default()).unwrap(), &hidden),
            Err(Error::MissingLabels(_))
        ));
    }

    #[test]
    fn threshold_extremes() {
        let n = net(4, 3);
        let set = labeled(30, 3);
        let prefix = n.cost_model().prefix_sums();
        for j in 0..30 {
            let x = set.features().row(j);
            let first = dynamic_forward(&n, x, 0.0).unwrap();
            assert_eq!((first.exit, first.macs), (1, prefix[0]));
            let last = dynamic_forward(&n, x, 1.0).unwrap();
            assert_eq!((last.exit, last.macs), (4, prefix[3]));
            assert_eq!(last.prediction, argmax(&n.forward_to_exit(x, 4).unwrap().probs));
        }
    }

    #[test]
    fn dynamic_trace_matches_hand_simulation() {
        for s in 0..20 {
            let n = net(4, s);
            let x = [s as f64 * 0.3 - 3.0, 1.0 - s as f64 * 0.1];
            let t = 0.34 + 0.03 * s as f64;
            let mut want = None;
            for k in 1..=4 {
                let out = n.forward_to_exit(&x, k).unwrap();
                let top = out.probs.iter().copied().fold(0.0, f64::max);
                if k == 4 || top > t {
                    want = Some(DynamicExit {
                        prediction: argmax(&out.probs),
                        exit: k,
                        macs: out.macs,
                    });
                    break;
                }
            }
            assert_eq!(dynamic_forward(&n, &x, t).unwrap(), want.unwrap());
        }
    }

    #[test]
    fn unconstrained_budget_runs_full_depth() {
        let n = net(4, 5);
        let set = labeled(60, 5);
        let full = *n.cost_model().prefix_sums().last().unwrap();
        let p = calibrate_budget(&n, &set, full as f64).unwrap();
        assert_eq!(p.threshold, 1.0);
        assert_eq!(p.exit_fractions, vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(p.accuracy.unwrap(), eval_anytime(&n, &set).unwrap().points[3].accuracy);
    }

    #[test]
    fn minimal_budget_exits_first() {
        let n = net(4, 6);
        let set = labeled(60, 6);
        let first = n.cost_model().prefix_sums()[0];
        let p = calibrate_budget(&n, &set, first as f64).unwrap();
        assert_eq!(p.exit_fractions[0], 1.0);
        assert_eq!(p.expected_macs, first as f64);
        assert!(matches!(
            calibrate_budget(&n, &set, first as f64 - 1.0),
            Err(Error::Budget { .. })
        ));
    }

    #[test]
    fn calibrated_profile_matches_simulation() {
        for s in 0..15 {
            let n = net(4, s);
            let set = labeled(80, s + 7);
            let prefix = n.cost_model().prefix_sums();
            let budget = (prefix[0] + prefix[3]) as f64 / 2.0 + s as f64;
            let p = calibrate_budget(&n, &set, budget).unwrap();
            assert!(p.expected_macs <= budget);
            let (fracs, macs, acc) = simulate(&n, &set, p.threshold);
            assert_eq!(p.exit_fractions, fracs);
            assert!((p.expected_macs - macs).abs() < 1e-9);
            assert_eq!(p.accuracy, Some(acc));
            let sum: f64 = p.exit_fractions.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            let identity: f64 = p.exit_fractions.iter().zip(&prefix).map(|(f, &m)| f * m as f64).sum();
            assert!((p.expected_macs - identity).abs() < 1e-9);
        }
    }

    #[test]
    fn calibration_picks_the_largest_feasible_threshold() {
        let n = net(3, 8);
        let set = labeled(50, 8);
        let prefix = n.cost_model().prefix_sums();
        let budget = (prefix[0] + prefix[1]) as f64 / 2.0;
        let p = calibrate_budget(&n, &set, budget).unwrap();
        // brute force over a fine grid: any larger threshold must overspend
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            if t > p.threshold {
                let (_, macs, _) = simulate(&n, &set, t);
                let (_, at_p, _) = simulate(&n, &set, p.threshold);
                assert!(macs > budget || macs == at_p, "threshold {t} fits the budget");
            }
        }
    }

    #[test]
    fn cost_is_monotone_in_threshold() {
        let n = net(4, 9);
        let set = labeled(70, 9);
        let costs: Vec<f64> = (0..=50)
            .map(|i| evaluate_threshold(&n, &set, i as f64 / 50.0).unwrap().expected_macs)
            .collect();
        assert!(costs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn budget_curve_boundaries_and_monotonicity() {
        let source = labeled(90, 4);
        let n = net(4, 10);
        let val = labeled(60, 11);
        let prefix = n.cost_model().prefix_sums();
        let last = eval_budget_curve(&n, &val, &source, &[prefix[3] as f64]).unwrap();
        assert_eq!(
            last[0].profile.accuracy.unwrap(),
            eval_anytime(&n, &source).unwrap().points[3].accuracy
        );

        let grid: Vec<f64> = (0..=10).map(|i| prefix[0] as f64 + (prefix[3] - prefix[0]) as f64 * i as f64 / 10.0).collect();
        let curve = eval_budget_curve(&n, &val, &source, &grid).unwrap();
        assert!(curve.windows(2).all(|w| w[0].profile.expected_macs <= w[1].profile.expected_macs));
        assert!(matches!(
            eval_budget_curve(&n, &val, &source, &[prefix[3] as f64, prefix[0] as f64]),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn transfer_gap_on_a_shared_distribution() {
        let n = net(4, 12);
        let val = labeled(400, 12);
        let test = labeled(400, 13);
        let prefix = n.cost_model().prefix_sums();
        let grid: Vec<f64> = (1..10).map(|i| prefix[0] as f64 + (prefix[3] - prefix[0]) as f64 * i as f64 / 10.0).collect();
        for p in eval_budget_curve(&n, &val, &test, &grid).unwrap() {
            assert!(p.profile.expected_macs <= 1.05 * p.budget, "{p:?}");
        }
    }

    #[test]
    fn curve_files_round_trip() {
        let n = net(3, 14);
        let set = labeled(40, 14);
        let curve = eval_anytime(&n, &set).unwrap();
        let mut buf = Vec::new();
        write_anytime_csv(&curve, &mut buf).unwrap();
        assert_eq!(parse_anytime_csv(std::str::from_utf8(&buf).unwrap()).unwrap(), curve);

        let prefix = n.cost_model().prefix_sums();
        let points = eval_budget_curve(&n, &set, &set, &[prefix[0] as f64, 40.5, prefix[2] as f64]).unwrap();
        let mut buf = Vec::new();
        write_budget_csv(&points, 3, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("budget,threshold,expected_macs,accuracy,frac_exit_1,frac_exit_2,frac_exit_3\n"));
        assert_eq!(parse_budget_csv(&text).unwrap(), points);
        assert!(matches!(parse_budget_csv("budget,threshold,expected_macs,accuracy,frac_exit_1\n1,x,2,3,1\n"), Err(Error::Parse { line: 2, .. })));
    }
}
