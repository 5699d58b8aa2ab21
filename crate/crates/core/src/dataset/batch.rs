use rand::seq::SliceRandom;
use rand::Rng;

use super::DomainSet;
use crate::error::{Error, Result};
use crate::selftrain::SelfTrainSet;

/// Shape of a training batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchPlan {
    /// Rows per batch for each domain.
    pub batch_size: usize,
    /// Share of each labeled batch taken from the self-training set.
    pub pseudo_fraction: f64,
}

impl Default for BatchPlan {
    fn default() -> Self {
        BatchPlan {
            batch_size: 36,
            pseudo_fraction: 1.0 / 3.0,
        }
    }
}

impl BatchPlan {
    pub fn new(batch_size: usize, pseudo_fraction: f64) -> Result<Self> {
        let plan = BatchPlan {
            batch_size,
            pseudo_fraction,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.pseudo_fraction) {
            return Err(Error::config("pseudo_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Pseudo-labeled rows per batch when a self-training set is available.
    pub fn pseudo_quota(&self) -> usize {
        (self.batch_size as f64 * self.pseudo_fraction).round() as usize
    }
}

/// Row indices making up one optimization step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedBatch {
    /// Labeled source rows.
    pub source_rows: Vec<usize>,
    /// Positions in [`SelfTrainSet::entries`].
    pub pseudo_entries: Vec<usize>,
    /// Unlabeled target rows for the domain loss.
    pub target_rows: Vec<usize>,
}

/// One epoch of batches.
///
/// Each batch carries `pseudo_quota` self-training entries (zero when the set
/// is empty, cycled when it is small) and `batch_size - pseudo_quota` source
/// rows. The epoch ends once every source row has been drawn; the last batch
/// is topped up by wrapping around the shuffled source order. Every batch is
/// paired with `batch_size` unlabeled target rows, wrapping around the
/// shuffled target order as needed.
pub fn make_mixed_batches<R: Rng + ?Sized>(
    source: &DomainSet,
    target: &DomainSet,
    selftrain: &SelfTrainSet,
    plan: &BatchPlan,
    rng: &mut R,
) -> Result<Vec<MixedBatch>> {
    plan.validate()?;
    if source.is_empty() {
        return Err(Error::EmptyDomain("source set has no rows".into()));
    }
    if target.is_empty() {
        return Err(Error::EmptyDomain("target set has no rows".into()));
    }
    let pseudo_quota = if selftrain.is_empty() { 0 } else { plan.pseudo_quota() };
    let source_quota = plan.batch_size - pseudo_quota;
    if source_quota == 0 {
        return Err(Error::config(
            "pseudo_fraction",
            "leaves no source rows in a batch",
        ));
    }

    let mut source_order: Vec<usize> = (0..source.len()).collect();
    source_order.shuffle(rng);
    let mut target_order: Vec<usize> = (0..target.len()).collect();
    target_order.shuffle(rng);
    let mut pseudo_order: Vec<usize> = (0..selftrain.len()).collect();
    pseudo_order.shuffle(rng);

    let n_batches = source.len().div_ceil(source_quota);
    let cycle = |order: &[usize], start: usize, count: usize| -> Vec<usize> {
        (start..start + count).map(|i| order[i % order.len()]).collect()
    };
    Ok((0..n_batches)
        .map(|b| MixedBatch {
            source_rows: cycle(&source_order, b * source_quota, source_quota),
            pseudo_entries: if pseudo_quota == 0 {
                Vec::new()
            } else {
                cycle(&pseudo_order, b * pseudo_quota, pseudo_quota)
            },
            target_rows: cycle(&target_order, b * plan.batch_size, plan.batch_size),
        })
        .collect())
}
