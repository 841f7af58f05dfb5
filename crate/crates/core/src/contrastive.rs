//! Confidence-weighted contrastive loss between strong-view embeddings of
//! pseudo-labeled unlabeled samples and the labeled embedding queues.

use ndarray::{Array2, ArrayView2};

use crate::memory::QueueSnapshot;
use crate::pseudo_label::argmax;

/// `s_i = max p̂′_i` when strictly above τ, else 0.
pub fn confidence_vector(p_prime: &Array2<f64>, tau: f64) -> Vec<f64> {
    p_prime
        .rows()
        .into_iter()
        .map(|r| {
            let m = r.fold(0.0f64, |a, &b| a.max(b));
            if m > tau {
                m
            } else {
                0.0
            }
        })
        .collect()
}

/// Pseudo-classes `argmax p̂′_i`.
pub fn pseudo_classes(p_prime: &Array2<f64>) -> Vec<usize> {
    p_prime.rows().into_iter().map(argmax).collect()
}

/// `w_ij = s_i · v_j`.
pub fn weight_matrix(s: &[f64], v: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((s.len(), v.len()), |(i, j)| s[i] * v[j])
}

#[derive(Clone, Debug)]
pub struct ContrastiveBatch<'a> {
    /// Unit-norm strong-view embeddings `[B × d]`.
    pub e_s: ArrayView2<'a, f64>,
    pub pseudo_class: &'a [usize],
    pub s: &'a [f64],
    pub queue: &'a QueueSnapshot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Gradient with respect to `e_s`.
    pub grad: Array2<f64>,
    /// Confident samples whose pseudo-class queue was empty.
    pub skipped: usize,
    /// Samples that contributed a term.
    pub active: usize,
}

/// `L_c = (1/B) Σ_i −(1/|E_{p_i}|) Σ_{p ∈ E_{p_i}} w_ip log softmax_p(sim/t)`,
/// with the softmax taken over every queued embedding of every class and
/// `|E_{p_i}|` the current fill of the pseudo-class queue.
pub fn contrastive_loss(batch: &ContrastiveBatch<'_>, temperature: f64) -> ContrastiveOutput {
    let (b, d) = batch.e_s.dim();
    let mut grad = Array2::<f64>::zeros((b, d));
    let total = batch.queue.total();
    if b == 0 || total == 0 {
        return ContrastiveOutput {
            loss: 0.0,
            grad,
            skipped: 0,
            active: 0,
        };
    }

    let mut keys = Array2::<f64>::zeros((total, d));
    let mut offsets = Vec::with_capacity(batch.queue.num_classes() + 1);
    let mut row = 0;
    for emb in &batch.queue.embeddings {
        offsets.push(row);
        for r in emb.rows() {
            keys.row_mut(row).assign(&r);
            row += 1;
        }
    }
    offsets.push(row);

    let logits = batch.e_s.dot(&keys.t()) / temperature;
    let mut loss = 0.0;
    let mut skipped = 0;
    let mut active = 0;
    let mut dlogits = Array2::<f64>::zeros((b, total));
    for i in 0..b {
        let s_i = batch.s[i];
        if s_i == 0.0 {
            continue;
        }
        let c = batch.pseudo_class[i];
        let (lo, hi) = (offsets[c], offsets[c + 1]);
        let n_pos = hi - lo;
        if n_pos == 0 {
            skipped += 1;
            continue;
        }
        active += 1;
        let li = logits.row(i);
        let m = li.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let z: f64 = li.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        let conf = &batch.queue.confidences[c];
        let mut term = 0.0;
        let mut w_sum = 0.0;
        for (p, &v) in (lo..hi).zip(conf) {
            let w = s_i * v;
            term += w * (li[p] - lse);
            w_sum += w;
        }
        loss += -term / n_pos as f64;
        let mut dl = dlogits.row_mut(i);
        let scale = 1.0 / (n_pos as f64 * b as f64);
        for (j, g) in dl.iter_mut().enumerate() {
            *g = scale * w_sum * (li[j] - lse).exp();
        }
        for (p, &v) in (lo..hi).zip(conf) {
            dl[p] -= scale * s_i * v;
        }
    }
    if active > 0 {
        grad = dlogits.dot(&keys) / temperature;
    }
    ContrastiveOutput {
        loss: loss / b as f64,
        grad,
        skipped,
        active,
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    fn snapshot(embeddings: Vec<Array2<f64>>, confidences: Vec<Vec<f64>>) -> QueueSnapshot {
        QueueSnapshot {
            embeddings,
            confidences,
        }
    }

    #[test]
    fn confidence_examples() {
        let s = confidence_vector(&array![[0.97, 0.03], [0.5, 0.5], [0.95, 0.05]], 0.95);
        assert_eq!(s, vec![0.97, 0.0, 0.0]);
        let w = weight_matrix(&[0.97, 0.0], &[0.85, 1.0]);
        assert!((w[[0, 0]] - 0.8245).abs() < 1e-15);
        assert_eq!(w[[0, 1]], 0.97);
        assert_eq!(w.row(1).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn lone_positive_gives_zero() {
        let q = snapshot(vec![array![[0.6, 0.8]]], vec![vec![1.0]]);
        let e = array![[0.6, 0.8]];
        let out = contrastive_loss(
            &ContrastiveBatch {
                e_s: e.view(),
                pseudo_class: &[0],
                s: &[1.0],
                queue: &q,
            },
            0.07,
        );
        assert!(out.loss.abs() < 1e-15);
    }

    #[test]
    fn symmetric_pair_gives_ln2() {
        let q = snapshot(vec![array![[1.0, 0.0]], array![[0.0, 1.0]]], vec![vec![1.0], vec![1.0]]);
        let r = 0.5f64.sqrt();
        let e = array![[r, r]];
        let out = contrastive_loss(
            &ContrastiveBatch {
                e_s: e.view(),
                pseudo_class: &[1],
                s: &[1.0],
                queue: &q,
            },
            0.07,
        );
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_pseudo_class_queue_is_skipped() {
        let q = snapshot(vec![array![[1.0, 0.0]], Array2::zeros((0, 2))], vec![vec![1.0], vec![]]);
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let out = contrastive_loss(
            &ContrastiveBatch {
                e_s: e.view(),
                pseudo_class: &[1, 0],
                s: &[0.99, 0.0],
                queue: &q,
            },
            0.07,
        );
        assert_eq!(out.skipped, 1);
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn all_queues_empty_gives_zero() {
        let q = snapshot(vec![Array2::zeros((0, 2)); 2], vec![vec![], vec![]]);
        let e = array![[1.0, 0.0]];
        let out = contrastive_loss(
            &ContrastiveBatch {
                e_s: e.view(),
                pseudo_class: &[0],
                s: &[1.0],
                queue: &q,
            },
            0.07,
        );
        assert_eq!(out.loss, 0.0);
    }
}
