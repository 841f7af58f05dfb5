use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::SourceDataset;
use crate::error::{ClafError, Result};
use crate::rng::{self, names};

/// Per-class counts decaying exponentially from `head` (class 1) to
/// `head / gamma` (class K), rounded to nearest and clamped at 1.
pub fn longtail_counts(head: usize, gamma: f64, num_classes: usize) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(ClafError::InvalidSpec(format!("need at least 2 classes, got {num_classes}")));
    }
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(ClafError::InvalidSpec(format!("imbalance ratio must be >= 1, got {gamma}")));
    }
    if head < 1 {
        return Err(ClafError::InvalidSpec("head-class count must be >= 1".into()));
    }
    let denom = (num_classes - 1) as f64;
    Ok((0..num_classes)
        .map(|k| {
            let n = head as f64 * gamma.powf(-(k as f64) / denom);
            (n.round() as usize).max(1)
        })
        .collect())
}

/// Long-tailed split parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub num_classes: usize,
    /// Labeled head-class size N1.
    pub labeled_head: usize,
    /// Unlabeled head-class size M1 (0 means no unlabeled pool).
    pub unlabeled_head: usize,
    /// Imbalance ratio γ = head / tail.
    pub imbalance_ratio: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        longtail_counts(self.labeled_head, self.imbalance_ratio, self.num_classes).map(|_| ())
    }

    pub fn labeled_counts(&self) -> Result<Vec<usize>> {
        longtail_counts(self.labeled_head, self.imbalance_ratio, self.num_classes)
    }

    pub fn unlabeled_counts(&self) -> Result<Vec<usize>> {
        if self.unlabeled_head == 0 {
            self.validate()?;
            return Ok(vec![0; self.num_classes]);
        }
        longtail_counts(self.unlabeled_head, self.imbalance_ratio, self.num_classes)
    }
}

/// Concrete labeled/unlabeled index assignment for one source dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub spec: SplitSpec,
    pub labeled_counts: Vec<usize>,
    pub unlabeled_counts: Vec<usize>,
    pub labeled_indices: Vec<Vec<usize>>,
    pub unlabeled_indices: Vec<Vec<usize>>,
}

impl SplitManifest {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    /// Labeled pool flattened to `(source index, class)` pairs, class-major.
    pub fn labeled_pool(&self) -> Vec<(usize, usize)> {
        self.labeled_indices
            .iter()
            .enumerate()
            .flat_map(|(k, idx)| idx.iter().map(move |&i| (i, k)))
            .collect()
    }

    /// Unlabeled pool with class information dropped.
    pub fn unlabeled_pool(&self) -> Vec<usize> {
        self.unlabeled_indices.iter().flatten().copied().collect()
    }
}

/// Draws a long-tailed labeled pool and a disjoint unlabeled pool from
/// `source`, deterministically for a given `spec.seed`.
pub fn build_splits(source: &dyn SourceDataset, spec: &SplitSpec) -> Result<SplitManifest> {
    let labeled_counts = spec.labeled_counts()?;
    let unlabeled_counts = spec.unlabeled_counts()?;
    if source.num_classes() != spec.num_classes {
        return Err(ClafError::InvalidSpec(format!(
            "split asks for {} classes but source {} has {}",
            spec.num_classes,
            source.name(),
            source.num_classes()
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); spec.num_classes];
    for i in 0..source.len() {
        by_class[source.label(i)].push(i);
    }
    let mut rng = rng::stream(spec.seed, names::SPLIT);
    let mut labeled_indices = Vec::with_capacity(spec.num_classes);
    let mut unlabeled_indices = Vec::with_capacity(spec.num_classes);
    for (k, pool) in by_class.iter_mut().enumerate() {
        let needed = labeled_counts[k] + unlabeled_counts[k];
        if pool.len() < needed {
            return Err(ClafError::InsufficientSamples {
                class: k,
                needed,
                available: pool.len(),
            });
        }
        pool.shuffle(&mut rng);
        let mut labeled = pool[..labeled_counts[k]].to_vec();
        let mut unlabeled = pool[labeled_counts[k]..needed].to_vec();
        labeled.sort_unstable();
        unlabeled.sort_unstable();
        labeled_indices.push(labeled);
        unlabeled_indices.push(unlabeled);
    }
    Ok(SplitManifest {
        spec: spec.clone(),
        labeled_counts,
        unlabeled_counts,
        labeled_indices,
        unlabeled_indices,
    })
}
