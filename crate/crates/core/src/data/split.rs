use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::geometry::JointSet;

/// How a fully labeled pool is divided into labeled and unlabeled parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    /// Fraction of the pool kept labeled, in `(0, 1]`.
    pub label_fraction: f64,
    /// Absolute labeled count; overrides `label_fraction` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_count: Option<usize>,
    /// Fraction of the remaining pool exposed as unlabeled data.
    #[serde(default = "one")]
    pub unlabeled_fraction: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { label_fraction: 0.05, label_count: None, unlabeled_fraction: 1.0, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.label_count.is_none() && !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::OutOfRange(format!("label_fraction {} not in (0, 1]", self.label_fraction)));
        }
        if self.label_count == Some(0) {
            return Err(Error::OutOfRange("label_count must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.unlabeled_fraction) {
            return Err(Error::OutOfRange(format!("unlabeled_fraction {} not in [0, 1]", self.unlabeled_fraction)));
        }
        Ok(())
    }

    pub fn labeled_count(&self, n: usize) -> usize {
        match self.label_count {
            Some(c) => c.min(n),
            None => ((self.label_fraction * n as f64).round() as usize).clamp(1.min(n), n),
        }
    }
}

/// Result of [`split`]. Unlabeled samples carry no joints; their labels are
/// kept aside (aligned by index) for diagnostics only.
#[derive(Debug, Clone, Default)]
pub struct Split {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    pub unlabeled_truth: Vec<Option<JointSet>>,
}

pub fn split(dataset: &[Sample], spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if let Some(s) = dataset.iter().find(|s| s.joints.is_none()) {
        return Err(Error::Contract(format!("split needs a fully labeled pool; {} has no joints", s.id)));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let n_labeled = spec.labeled_count(dataset.len());
    let (labeled_idx, pool) = order.split_at(n_labeled);
    let n_unlabeled = (spec.unlabeled_fraction * pool.len() as f64).round() as usize;

    let labeled = labeled_idx.iter().map(|&i| dataset[i].clone()).collect();
    let mut unlabeled = Vec::with_capacity(n_unlabeled);
    let mut unlabeled_truth = Vec::with_capacity(n_unlabeled);
    for &i in &pool[..n_unlabeled] {
        let mut s = dataset[i].clone();
        unlabeled_truth.push(s.joints.take());
        unlabeled.push(s);
    }
    Ok(Split { labeled, unlabeled, unlabeled_truth })
}
