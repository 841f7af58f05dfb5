//! Per-class balanced feature memory.
//!
//! Each class keeps one bounded FIFO of entries; an entry carries the EMA
//! encoder feature (used for prototypes), the EMA projected embedding and
//! its reliability weight (used as contrastive keys). Keeping the three in
//! one record makes the feature, embedding and confidence queues move in
//! lockstep by construction.

use std::collections::VecDeque;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ClafError, Result};

const UNIT_NORM_TOLERANCE: f32 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub feature: Vec<f32>,
    pub embedding: Vec<f32>,
    /// 1 for raw labeled features, λ for feature-augmented ones.
    pub confidence: f32,
    pub augmented: bool,
}

/// Class prototypes; rows of undefined classes (empty queue) are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub centers: Array2<f64>,
    pub defined: Vec<bool>,
}

impl Prototypes {
    pub fn num_defined(&self) -> usize {
        self.defined.iter().filter(|d| **d).count()
    }
}

/// Frozen view of the embedding queues used as contrastive keys.
#[derive(Clone, Debug, PartialEq)]
pub struct QueueSnapshot {
    /// `embeddings[k]` is `[len_k, d]`.
    pub embeddings: Vec<Array2<f64>>,
    pub confidences: Vec<Vec<f64>>,
}

impl QueueSnapshot {
    pub fn num_classes(&self) -> usize {
        self.embeddings.len()
    }

    pub fn len(&self, class: usize) -> usize {
        self.confidences[class].len()
    }

    pub fn total(&self) -> usize {
        self.confidences.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMemory {
    capacity: usize,
    feature_dim: usize,
    embedding_dim: usize,
    queues: Vec<VecDeque<MemoryEntry>>,
}

impl ClassMemory {
    /// `embedding_dim == 0` gives a prototype-only memory.
    pub fn new(num_classes: usize, capacity: usize, feature_dim: usize, embedding_dim: usize) -> Result<Self> {
        if num_classes == 0 || capacity == 0 {
            return Err(ClafError::Config(
                "memory needs at least one class and a positive capacity".into(),
            ));
        }
        Ok(Self {
            capacity,
            feature_dim,
            embedding_dim,
            queues: vec![VecDeque::with_capacity(capacity); num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.queues.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn len(&self, class: usize) -> usize {
        self.queues[class].len()
    }

    pub fn fill(&self) -> Vec<usize> {
        self.queues.iter().map(VecDeque::len).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    pub fn entries(&self, class: usize) -> &VecDeque<MemoryEntry> {
        &self.queues[class]
    }

    pub fn augmented_count(&self, class: usize) -> usize {
        self.queues[class].iter().filter(|e| e.augmented).count()
    }

    /// Enqueues one entry for `class`, evicting the oldest when full.
    pub fn push(&mut self, class: usize, entry: MemoryEntry) -> Result<()> {
        if class >= self.queues.len() {
            return Err(ClafError::ClassOutOfRange {
                class,
                num_classes: self.queues.len(),
            });
        }
        if entry.feature.len() != self.feature_dim || entry.embedding.len() != self.embedding_dim {
            return Err(ClafError::ShapeMismatch {
                expected: format!("feature {} / embedding {}", self.feature_dim, self.embedding_dim),
                actual: format!("feature {} / embedding {}", entry.feature.len(), entry.embedding.len()),
            });
        }
        if !(entry.confidence > 0.0 && entry.confidence <= 1.0) {
            return Err(ClafError::InvalidSpec(format!(
                "memory confidence must lie in (0, 1], got {}",
                entry.confidence
            )));
        }
        let norm = entry.embedding.iter().map(|v| v * v).sum::<f32>().sqrt();
        if self.embedding_dim > 0 && (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(ClafError::InvalidSpec(format!("memory embedding must be unit-norm, got norm {norm}")));
        }
        let q = &mut self.queues[class];
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(entry);
        Ok(())
    }

    /// Mean feature per class, accumulated in f64.
    pub fn prototypes(&self) -> Prototypes {
        let mut centers = Array2::<f64>::zeros((self.queues.len(), self.feature_dim));
        let mut defined = vec![false; self.queues.len()];
        for (k, q) in self.queues.iter().enumerate() {
            if q.is_empty() {
                continue;
            }
            defined[k] = true;
            let mut row = centers.row_mut(k);
            for e in q {
                row.iter_mut().zip(&e.feature).for_each(|(c, f)| *c += *f as f64);
            }
            let n = q.len() as f64;
            row.mapv_inplace(|c| c / n);
        }
        Prototypes { centers, defined }
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        let embeddings = self
            .queues
            .iter()
            .map(|q| {
                let mut m = Array2::<f64>::zeros((q.len(), self.embedding_dim));
                for (mut row, e) in m.rows_mut().into_iter().zip(q) {
                    row.iter_mut().zip(&e.embedding).for_each(|(r, v)| *r = *v as f64);
                }
                m
            })
            .collect();
        let confidences = self
            .queues
            .iter()
            .map(|q| q.iter().map(|e| e.confidence as f64).collect())
            .collect();
        QueueSnapshot {
            embeddings,
            confidences,
        }
    }

    /// Replaces the contents from a checkpoint.
    pub fn restore(&mut self, queues: Vec<Vec<MemoryEntry>>) -> Result<()> {
        if queues.len() != self.queues.len() {
            return Err(ClafError::Checkpoint(format!(
                "memory has {} classes, checkpoint has {}",
                self.queues.len(),
                queues.len()
            )));
        }
        let mut fresh = Self::new(self.queues.len(), self.capacity, self.feature_dim, self.embedding_dim)?;
        for (k, q) in queues.into_iter().enumerate() {
            if q.len() > self.capacity {
                return Err(ClafError::Checkpoint(format!("queue {k} exceeds capacity")));
            }
            for e in q {
                fresh.push(k, e).map_err(|err| ClafError::Checkpoint(err.to_string()))?;
            }
        }
        *self = fresh;
        Ok(())
    }

    pub fn export(&self) -> Vec<Vec<MemoryEntry>> {
        self.queues.iter().map(|q| q.iter().cloned().collect()).collect()
    }
}
