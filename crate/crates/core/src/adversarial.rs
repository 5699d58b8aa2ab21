//! Source classification and per-exit domain confusion losses.

use crate::cascade::{MultiExitNet, NetGrads};
use crate::error::{Error, Result};
use crate::numerics::{binary_cross_entropy, cross_entropy, GrlGate, Matrix};

/// Domain label of source rows for the discriminators.
pub const SOURCE_DOMAIN: f64 = 0.0;
/// Domain label of target rows for the discriminators.
pub const TARGET_DOMAIN: f64 = 1.0;

/// A scalar loss, its per-exit breakdown and parameter gradients.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub per_exit: Vec<f64>,
    pub grads: NetGrads,
}

/// The terms of `L = L_s + α·L_d + β·L_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_s: f64,
    pub l_d: f64,
    pub l_t: f64,
    pub total: f64,
    pub per_exit_ls: Vec<f64>,
    pub per_exit_ld: Vec<f64>,
}

impl LossReport {
    pub fn new(l_s: f64, l_d: f64, l_t: f64, alpha: f64, beta: f64, per_exit_ls: Vec<f64>, per_exit_ld: Vec<f64>) -> Self {
        LossReport {
            l_s,
            l_d,
            l_t,
            total: l_s + alpha * l_d + beta * l_t,
            per_exit_ls,
            per_exit_ld,
        }
    }

    /// Term-wise mean of several reports, with `total` recombined.
    pub fn mean(reports: &[LossReport], alpha: f64, beta: f64) -> Option<LossReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let avg_vec = |f: fn(&LossReport) -> &Vec<f64>| {
            (0..f(first).len())
                .map(|k| reports.iter().map(|r| f(r)[k]).sum::<f64>() / n)
                .collect()
        };
        Some(LossReport::new(
            avg(|r| r.l_s),
            avg(|r| r.l_d),
            avg(|r| r.l_t),
            alpha,
            beta,
            avg_vec(|r| &r.per_exit_ls),
            avg_vec(|r| &r.per_exit_ld),
        ))
    }
}

/// Sum over exits of the mean cross-entropy at each exit, with the gradient
/// with respect to each exit's logits.
pub fn source_loss_from_probs(exit_probs: &[Matrix], labels: &[usize]) -> Result<(f64, Vec<f64>, Vec<Matrix>)> {
    let mut per_exit = Vec::with_capacity(exit_probs.len());
    let mut grads = Vec::with_capacity(exit_probs.len());
    for probs in exit_probs {
        let (l, g) = cross_entropy(probs, labels)?;
        per_exit.push(l);
        grads.push(g);
    }
    Ok((per_exit.iter().sum(), per_exit, grads))
}

/// Classification loss on labeled rows, summed over every exit.
pub fn source_loss(net: &MultiExitNet, batch: &Matrix, labels: &[usize]) -> Result<LossOutput> {
    let pass = net.forward_all(batch)?;
    let (loss, per_exit, logit_grads) = source_loss_from_probs(&pass.probs, labels)?;
    let mut grads = NetGrads::zeros(net);
    let k = net.exit_count();
    let logit_grads: Vec<Option<Matrix>> = logit_grads.into_iter().map(Some).collect();
    net.backward(&pass, &logit_grads, &vec![None; k], &mut grads)?;
    Ok(LossOutput { loss, per_exit, grads })
}

/// Binary cross-entropy of every discriminator, source rows labeled 0 and
/// target rows labeled 1, averaged within each domain and summed over exits
/// and domains.
///
/// Discriminator parameters get the gradient that lowers the loss; the trunk
/// gets it reversed and scaled by `grl_lambda`.
pub fn domain_loss(
    net: &MultiExitNet,
    source_batch: &Matrix,
    target_batch: &Matrix,
    grl_lambda: f64,
) -> Result<LossOutput> {
    if source_batch.rows() == 0 {
        return Err(Error::EmptyDomain("source batch is empty".into()));
    }
    if target_batch.rows() == 0 {
        return Err(Error::EmptyDomain("target batch is empty".into()));
    }
    let gate = GrlGate::new(grl_lambda);
    let k = net.exit_count();
    let mut grads = NetGrads::zeros(net);
    let mut per_exit = vec![0.0; k];
    for (batch, domain) in [(source_batch, SOURCE_DOMAIN), (target_batch, TARGET_DOMAIN)] {
        let pass = net.forward_all(batch)?;
        let mut feature_grads = Vec::with_capacity(k);
        for (i, disc) in net.discriminators.iter().enumerate() {
            let dpass = disc.forward(&pass.features[i])?;
            let (loss, grad_logits) = binary_cross_entropy(&dpass.logits, domain)?;
            per_exit[i] += loss;
            let (hg, og, fg) = disc.backward(&dpass, &grad_logits, &gate)?;
            grads.disc_hidden[i].add_scaled(&hg, 1.0)?;
            grads.disc_output[i].add_scaled(&og, 1.0)?;
            feature_grads.push(Some(fg));
        }
        net.backward(&pass, &vec![None; k], &feature_grads, &mut grads)?;
    }
    Ok(LossOutput {
        loss: per_exit.iter().sum(),
        per_exit,
        grads,
    })
}

/// Reversal strength ramp `2 / (1 + exp(-10·p)) - 1` for training progress
/// `p ∈ [0, 1]`.
pub fn grl_schedule(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0
}

/// Annealed learning rate `lr0 / (1 + 10·p)^0.75`.
pub fn lr_schedule(lr0: f64, progress: f64) -> f64 {
    lr0 / (1.0 + 10.0 * progress).powf(0.75)
}
