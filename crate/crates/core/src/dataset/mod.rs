//! Labeled source and unlabeled target domains.
//!
//! A [`DomainSet`] used for adaptation never exposes target labels to the
//! training code. Generators keep the ground truth in a shadow field that
//! only evaluation reads through [`DomainSet::eval_labels`].

mod batch;
mod csv;
mod synth;

pub use batch::{make_mixed_batches, BatchPlan, MixedBatch};
pub use csv::{load_csv, parse_csv, save_csv, write_csv};
pub use synth::{gen_blobs_shift, gen_two_moons_shift};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Label value used for unlabeled rows in CSV files.
pub const UNLABELED: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSet {
    features: Matrix,
    labels: Vec<Option<usize>>,
    domain: DomainTag,
    class_count: usize,
    shadow_labels: Option<Vec<usize>>,
}

impl DomainSet {
    pub fn new(
        features: Matrix,
        labels: Vec<Option<usize>>,
        domain: DomainTag,
        class_count: usize,
    ) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::config("class_count", "must be at least 1"));
        }
        if labels.len() != features.rows() {
            return Err(Error::dims("DomainSet::new", features.shape(), (labels.len(), 1)));
        }
        check_labels(labels.iter().flatten().copied(), class_count)?;
        if domain == DomainTag::Source {
            if let Some(row) = labels.iter().position(Option::is_none) {
                return Err(Error::MissingLabels(format!("source row {row} is unlabeled")));
            }
        }
        Ok(DomainSet {
            features,
            labels,
            domain,
            class_count,
            shadow_labels: None,
        })
    }

    pub fn labeled(features: Matrix, labels: Vec<usize>, domain: DomainTag, class_count: usize) -> Result<Self> {
        DomainSet::new(features, labels.into_iter().map(Some).collect(), domain, class_count)
    }

    /// An all-unlabeled target set.
    pub fn unlabeled(features: Matrix, class_count: usize) -> Result<Self> {
        let n = features.rows();
        DomainSet::new(features, vec![None; n], DomainTag::Target, class_count)
    }

    /// Attaches ground truth visible only to evaluation.
    pub fn with_shadow_labels(mut self, shadow: Vec<usize>) -> Result<Self> {
        if shadow.len() != self.len() {
            return Err(Error::dims(
                "DomainSet::with_shadow_labels",
                (self.len(), 1),
                (shadow.len(), 1),
            ));
        }
        check_labels(shadow.iter().copied(), self.class_count)?;
        self.shadow_labels = Some(shadow);
        Ok(self)
    }

    /// Moves every visible label into the shadow field and marks all rows
    /// unlabeled.
    pub fn hide_labels(self) -> Result<Self> {
        let labels = self.require_labels()?;
        let class_count = self.class_count;
        DomainSet::unlabeled(self.features, class_count)?.with_shadow_labels(labels)
    }

    /// Restores shadow labels as visible labels (evaluation files).
    pub fn reveal_labels(&self) -> Result<Self> {
        let labels = self.eval_labels()?;
        DomainSet::labeled(self.features.clone(), labels, self.domain, self.class_count)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn domain(&self) -> DomainTag {
        self.domain
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn shadow_labels(&self) -> Option<&[usize]> {
        self.shadow_labels.as_deref()
    }

    /// Visible labels, failing if any row is unlabeled. Training paths use
    /// this for supervision.
    pub fn require_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| Error::MissingLabels(format!("row {i} is unlabeled"))))
            .collect()
    }

    /// Labels for scoring: visible labels when complete, else shadow labels.
    pub fn eval_labels(&self) -> Result<Vec<usize>> {
        if self.labels.iter().all(Option::is_some) {
            return self.require_labels();
        }
        self.shadow_labels
            .clone()
            .ok_or_else(|| Error::MissingLabels("evaluation set has no labels".into()))
    }

    pub fn has_eval_labels(&self) -> bool {
        self.labels.iter().all(Option::is_some) || self.shadow_labels.is_some()
    }
}

fn check_labels(labels: impl Iterator<Item = usize>, class_count: usize) -> Result<()> {
    for label in labels {
        if label >= class_count {
            return Err(Error::Index {
                what: "class label",
                index: label,
                limit: class_count,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats(n: usize) -> Matrix {
        Matrix::new(n, 1, (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn source_sets_reject_unlabeled_rows() {
        let err = DomainSet::new(feats(2), vec![Some(0), None], DomainTag::Source, 2).unwrap_err();
        assert!(matches!(err, Error::MissingLabels(_)));
    }

    #[test]
    fn labels_must_be_in_range() {
        assert!(DomainSet::labeled(feats(1), vec![2], DomainTag::Source, 2).is_err());
        assert!(DomainSet::labeled(feats(1), vec![0], DomainTag::Source, 0).is_err());
    }

    #[test]
    fn hidden_labels_are_only_reachable_for_evaluation() {
        let set = DomainSet::labeled(feats(3), vec![0, 1, 1], DomainTag::Target, 2)
            .unwrap()
            .hide_labels()
            .unwrap();
        assert!(set.labels().iter().all(Option::is_none));
        assert!(set.require_labels().is_err());
        assert_eq!(set.eval_labels().unwrap(), vec![0, 1, 1]);
        assert_eq!(set.reveal_labels().unwrap().require_labels().unwrap(), vec![0, 1, 1]);
    }

    #[test]
    fn unlabeled_without_shadow_cannot_be_evaluated() {
        let set = DomainSet::unlabeled(feats(2), 2).unwrap();
        assert!(matches!(set.eval_labels(), Err(Error::MissingLabels(_))));
    }
}
