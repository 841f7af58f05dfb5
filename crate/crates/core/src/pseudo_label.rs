//! Linear and semantic pseudo-labels, their blend, and the unsupervised
//! consistency and alignment losses. Everything here runs in f64.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ClafError, Result};
use crate::memory::Prototypes;

/// Probability clamp applied inside every logarithm.
pub const PROB_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    /// Confidence threshold τ for the consistency mask and the contrastive weights.
    pub threshold: f64,
    /// Temperature of the prototype similarity softmax.
    pub proto_temperature: f64,
    /// Sharpening exponent 1/T applied to the relative class frequency when
    /// turning it into a blend weight.
    pub dist_temperature: f64,
    /// Effective length (in pseudo-labels) of the decaying class histogram.
    pub histogram_window: f64,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            threshold: 0.95,
            proto_temperature: 0.05,
            dist_temperature: 1.5,
            histogram_window: 1e4,
        }
    }
}

impl PseudoLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(ClafError::Config(format!(
                "pseudo_label.threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.proto_temperature > 0.0) || !(self.dist_temperature > 0.0) {
            return Err(ClafError::Config("pseudo_label temperatures must be positive".into()));
        }
        if !(self.histogram_window >= 1.0) {
            return Err(ClafError::Config("pseudo_label.histogram_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Row-wise softmax; `-inf` entries get probability 0. A row that is
/// entirely `-inf` becomes uniform.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        if m == f64::NEG_INFINITY {
            let k = row.len() as f64;
            row.fill(1.0 / k);
            continue;
        }
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub fn to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(|v| v as f64)
}

pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// p̂ = softmax of classifier logits.
pub fn linear_pseudo_label(logits: &Array2<f64>) -> Array2<f64> {
    softmax_rows(logits)
}

/// Semantic pseudo-labels with the cosine similarities they were built
/// from, so that the alignment gradient can be pushed back to `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticLabels {
    pub q: Array2<f64>,
    /// Cosine similarities `[B × K]`; undefined prototypes hold `-inf`.
    pub cosine: Array2<f64>,
    /// Rows of `z` with zero norm (similarities forced to 0).
    pub zero_norm: usize,
}

/// q = softmax(cos(z, c_k) / T) over the defined prototypes.
pub fn semantic_pseudo_label(z: &Array2<f64>, protos: &Prototypes, temperature: f64) -> SemanticLabels {
    let k = protos.defined.len();
    let proto_norms: Vec<f64> = protos.centers.rows().into_iter().map(|c| c.dot(&c).sqrt()).collect();
    let mut cosine = Array2::<f64>::zeros((z.nrows(), k));
    let mut zero_norm = 0;
    for (i, zi) in z.rows().into_iter().enumerate() {
        let zn = zi.dot(&zi).sqrt();
        if zn == 0.0 {
            zero_norm += 1;
        }
        for (c, proto) in protos.centers.rows().into_iter().enumerate() {
            cosine[[i, c]] = if !protos.defined[c] {
                f64::NEG_INFINITY
            } else if zn == 0.0 || proto_norms[c] == 0.0 {
                0.0
            } else {
                zi.dot(&proto) / (zn * proto_norms[c])
            };
        }
    }
    let q = softmax_rows(&cosine.mapv(|s| s / temperature));
    SemanticLabels { q, cosine, zero_norm }
}

/// Pulls a gradient with respect to `q` back to `z` through the softmax and
/// the cosine similarities. Prototypes are constants.
pub fn semantic_backward(
    z: &Array2<f64>,
    protos: &Prototypes,
    temperature: f64,
    labels: &SemanticLabels,
    grad_q: &Array2<f64>,
) -> Array2<f64> {
    let mut grad_z = Array2::<f64>::zeros(z.raw_dim());
    let unit: Vec<Option<Array1<f64>>> = protos
        .centers
        .rows()
        .into_iter()
        .zip(&protos.defined)
        .map(|(c, &d)| {
            let n = c.dot(&c).sqrt();
            (d && n > 0.0).then(|| c.mapv(|v| v / n))
        })
        .collect();
    for i in 0..z.nrows() {
        let zi = z.row(i);
        let zn = zi.dot(&zi).sqrt();
        if zn == 0.0 {
            continue;
        }
        let q = labels.q.row(i);
        let g = grad_q.row(i);
        let qg: f64 = q.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let mut out = grad_z.row_mut(i);
        for (c, u) in unit.iter().enumerate() {
            let Some(u) = u else { continue };
            let ds = q[c] * (g[c] - qg) / temperature;
            if ds == 0.0 {
                continue;
            }
            let s = labels.cosine[[i, c]];
            // ∂cos/∂z = u/|z| − cos·z/|z|²
            for ((o, &uv), &zv) in out.iter_mut().zip(u.iter()).zip(zi.iter()) {
                *o += ds * (uv / zn - s * zv / (zn * zn));
            }
        }
    }
    grad_z
}

/// Decaying histogram of confident linear pseudo-labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: Vec<f64>,
    pub window: f64,
}

impl ClassHistogram {
    pub fn new(num_classes: usize, window: f64) -> Self {
        Self {
            counts: vec![0.0; num_classes],
            window,
        }
    }

    /// Each recorded label decays older mass by `1 − 1/window`.
    pub fn observe(&mut self, classes: &[usize]) {
        let keep = 1.0 - 1.0 / self.window;
        for &c in classes {
            self.counts.iter_mut().for_each(|h| *h *= keep);
            self.counts[c] += 1.0;
        }
    }

    /// Fraction of recent pseudo-labels per class (zeros when empty).
    pub fn frequencies(&self) -> Vec<f64> {
        let total: f64 = self.counts.iter().sum();
        if total == 0.0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|h| h / total).collect()
    }

    /// Per-class blend weights `(h_c / max h)^(1/T) · ramp`, where `ramp` is
    /// the fraction of classes whose prototype is defined. All zero while
    /// the histogram is empty.
    pub fn blend_weights(&self, dist_temperature: f64, ramp: f64) -> Vec<f64> {
        let max = self.counts.iter().cloned().fold(0.0, f64::max);
        if max == 0.0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts
            .iter()
            .map(|h| ((h / max).powf(1.0 / dist_temperature) * ramp).clamp(0.0, 1.0))
            .collect()
    }
}

/// p̂′ = (1 − w_c)·p̂ + w_c·q̂ with c = argmax p̂, renormalised.
pub fn blend(p_hat: &Array2<f64>, q_hat: &Array2<f64>, weights: &[f64]) -> Array2<f64> {
    let mut out = p_hat.clone();
    for (mut row, q) in out.rows_mut().into_iter().zip(q_hat.rows()) {
        let w = weights[argmax(row.view())];
        if w == 0.0 {
            continue;
        }
        row.zip_mut_with(&q, |p, &qv| *p = (1.0 - w) * *p + w * qv);
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Pseudo-label outputs for one unlabeled batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBundle {
    pub p_hat: Array2<f64>,
    pub q_hat: Array2<f64>,
    pub p_prime: Array2<f64>,
    /// `max p̂′ ≥ τ` (consistency mask).
    pub confident: Vec<bool>,
    pub argmax_class: Vec<usize>,
}

impl PseudoLabelBundle {
    pub fn new(p_hat: Array2<f64>, q_hat: Array2<f64>, p_prime: Array2<f64>, threshold: f64) -> Self {
        let argmax_class: Vec<usize> = p_prime.rows().into_iter().map(argmax).collect();
        let confident = p_prime
            .rows()
            .into_iter()
            .map(|r| r.fold(0.0f64, |a, &b| a.max(b)) >= threshold)
            .collect();
        Self {
            p_hat,
            q_hat,
            p_prime,
            confident,
            argmax_class,
        }
    }

    pub fn confident_fraction(&self) -> f64 {
        if self.confident.is_empty() {
            return 0.0;
        }
        self.confident.iter().filter(|c| **c).count() as f64 / self.confident.len() as f64
    }
}

/// Masked cross-entropy between one-hot(argmax p̂′) and the strong-view
/// prediction, averaged over the whole batch.
pub fn fixmatch_loss(p_prime: &Array2<f64>, p_strong: &Array2<f64>, tau: f64) -> f64 {
    let b = p_prime.nrows();
    if b == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (pp, ps) in p_prime.rows().into_iter().zip(p_strong.rows()) {
        let max = pp.fold(0.0f64, |a, &v| a.max(v));
        if max >= tau {
            total += -ps[argmax(pp)].max(PROB_EPS).ln();
        }
    }
    total / b as f64
}

/// Value and gradient with respect to the strong-view logits.
pub fn fixmatch_loss_with_grad(p_prime: &Array2<f64>, strong_logits: &Array2<f64>, tau: f64) -> (f64, Array2<f64>) {
    let p_strong = softmax_rows(strong_logits);
    let value = fixmatch_loss(p_prime, &p_strong, tau);
    let b = p_prime.nrows().max(1) as f64;
    let mut grad = Array2::<f64>::zeros(strong_logits.raw_dim());
    for ((pp, ps), mut g) in p_prime.rows().into_iter().zip(p_strong.rows()).zip(grad.rows_mut()) {
        let max = pp.fold(0.0f64, |a, &v| a.max(v));
        let c = argmax(pp);
        if max < tau || ps[c] < PROB_EPS {
            continue;
        }
        g.assign(&ps);
        g[c] -= 1.0;
        g.mapv_inplace(|v| v / b);
    }
    (value, grad)
}

/// Cross-entropy from a uniform target to the batch-mean semantic
/// distribution: `−(1/K) Σ_k ln max(q̄_k, ε)`. Returns the value and the
/// gradient with respect to each row of `q`.
pub fn align_loss(q: &Array2<f64>) -> (f64, Array2<f64>) {
    let (b, k) = q.dim();
    if b == 0 {
        return (0.0, Array2::zeros((0, k)));
    }
    let mean = q.mean_axis(Axis(0)).expect("non-empty batch");
    let value = -mean.iter().map(|m| m.max(PROB_EPS).ln()).sum::<f64>() / k as f64;
    let col: Vec<f64> = mean
        .iter()
        .map(|&m| if m > PROB_EPS { -1.0 / (k as f64 * b as f64 * m) } else { 0.0 })
        .collect();
    let grad = Array2::from_shape_fn((b, k), |(_, c)| col[c]);
    (value, grad)
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use proptest::prelude::*;

    use super::*;

    fn protos(rows: Array2<f64>, defined: Vec<bool>) -> Prototypes {
        Prototypes { centers: rows, defined }
    }

    #[test]
    fn linear_examples() {
        let p = linear_pseudo_label(&array![[3f64.ln(), 0.0], [0.0, 0.0]]);
        assert!((p[[0, 0]] - 0.75).abs() < 1e-15);
        assert!((p[[1, 0]] - 0.5).abs() < 1e-15);
        let shifted = linear_pseudo_label(&array![[3f64.ln() + 7.0, 7.0]]);
        assert!((shifted[[0, 0]] - 0.75).abs() < 1e-14);
    }

    #[test]
    fn semantic_aligned_example() {
        let c = protos(array![[1.0, 0.0], [0.0, 1.0]], vec![true, true]);
        let out = semantic_pseudo_label(&array![[2.0, 0.0]], &c, 0.05);
        let expected_tail = 1.0 / (1.0 + 20f64.exp());
        assert!((out.q[[0, 1]] - expected_tail).abs() < 1e-18);
        assert!((out.q[[0, 1]] - 2.1e-9).abs() < 1e-10);
    }

    #[test]
    fn semantic_masks_undefined_and_zero_norm() {
        let c = protos(array![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]], vec![true, false, true]);
        let out = semantic_pseudo_label(&array![[0.3, 0.4], [0.0, 0.0]], &c, 0.05);
        assert_eq!(out.q[[0, 1]], 0.0);
        assert_eq!(out.q.row(1).to_vec(), vec![0.5, 0.0, 0.5]);
        assert_eq!(out.zero_norm, 1);
        let same = protos(array![[1.0, 1.0], [1.0, 1.0]], vec![true, true]);
        let u = semantic_pseudo_label(&array![[0.2, -3.0]], &same, 0.05);
        assert!((u.q[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn semantic_backward_matches_finite_differences() {
        let c = protos(array![[1.0, 0.2, -0.3], [0.1, 1.0, 0.5], [0.0, 0.0, 0.0]], vec![true, true, false]);
        let z = array![[0.4, -0.2, 0.9], [1.1, 0.3, -0.4]];
        let probe = array![[0.3, -1.0, 0.7], [1.2, 0.1, -0.5]];
        let t = 0.5;
        let f = |z: &Array2<f64>| (semantic_pseudo_label(z, &c, t).q * &probe).sum();
        let labels = semantic_pseudo_label(&z, &c, t);
        let g = semantic_backward(&z, &c, t, &labels, &probe);
        let h = 1e-6;
        for idx in 0..z.len() {
            let mut zp = z.clone();
            zp.as_slice_mut().unwrap()[idx] += h;
            let mut zm = z.clone();
            zm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((fd - g.as_slice().unwrap()[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn blend_identities() {
        let p = array![[0.7, 0.2, 0.1]];
        let q = array![[0.1, 0.1, 0.8]];
        assert_eq!(blend(&p, &q, &[0.0; 3]), p);
        let full = blend(&p, &q, &[1.0; 3]);
        for (a, b) in full.iter().zip(q.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in blend(&p, &p, &[0.4; 3]).iter().zip(p.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn histogram_weights_track_overrepresentation() {
        let mut h = ClassHistogram::new(3, 1e4);
        assert_eq!(h.blend_weights(1.0, 1.0), vec![0.0; 3]);
        h.observe(&[0, 0, 0, 0, 1, 1]);
        let w = h.blend_weights(1.0, 1.0);
        assert!((w[0] - 1.0).abs() < 1e-12);
        assert!(w[1] < w[0] && w[1] > 0.0 && w[2] == 0.0);
        let half = h.blend_weights(1.0, 0.5);
        assert!((half[0] - 0.5).abs() < 1e-12);
        let f = h.frequencies();
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fixmatch_examples() {
        let tau = 0.95;
        let unconfident = array![[0.5, 0.5]];
        assert_eq!(fixmatch_loss(&unconfident, &array![[0.1, 0.9]], tau), 0.0);
        let confident = array![[0.97, 0.03]];
        assert!((fixmatch_loss(&confident, &array![[0.5, 0.5]], tau) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(fixmatch_loss(&confident, &array![[1.0, 0.0]], tau), 0.0);
        let boundary = array![[0.95, 0.05]];
        assert!(fixmatch_loss(&boundary, &array![[0.5, 0.5]], tau) > 0.0);
    }

    #[test]
    fn fixmatch_grad_matches_finite_differences() {
        let pp = array![[0.97, 0.02, 0.01], [0.4, 0.3, 0.3], [0.0, 0.01, 0.99]];
        let logits = array![[0.3, -0.2, 1.0], [0.1, 0.5, -0.7], [2.0, 0.0, -1.0]];
        let (_, g) = fixmatch_loss_with_grad(&pp, &logits, 0.95);
        let h = 1e-6;
        for idx in 0..logits.len() {
            let mut lp = logits.clone();
            lp.as_slice_mut().unwrap()[idx] += h;
            let mut lm = logits.clone();
            lm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (fixmatch_loss(&pp, &softmax_rows(&lp), 0.95) - fixmatch_loss(&pp, &softmax_rows(&lm), 0.95))
                / (2.0 * h);
            assert!((fd - g.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn align_examples() {
        let k = 4;
        let uniform = Array2::from_elem((3, k), 0.25);
        assert!((align_loss(&uniform).0 - (k as f64).ln()).abs() < 1e-12);
        let onehot = array![[1.0, 0.0, 0.0, 0.0]];
        let (v, _) = align_loss(&onehot);
        assert!((v - 3.0 * -(PROB_EPS.ln()) / 4.0).abs() < 1e-9);
    }

    #[test]
    fn align_grad_matches_finite_differences() {
        let q = array![[0.6, 0.3, 0.1], [0.2, 0.2, 0.6]];
        let (_, g) = align_loss(&q);
        let h = 1e-7;
        for idx in 0..q.len() {
            let mut qp = q.clone();
            qp.as_slice_mut().unwrap()[idx] += h;
            let mut qm = q.clone();
            qm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (align_loss(&qp).0 - align_loss(&qm).0) / (2.0 * h);
            assert!((fd - g.as_slice().unwrap()[idx]).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn distributions_are_normalised(
            logits in prop::collection::vec(-30.0f64..30.0, 12),
            z in prop::collection::vec(-5.0f64..5.0, 12),
            w in prop::collection::vec(0.0f64..=1.0, 4),
        ) {
            let l = Array2::from_shape_vec((3, 4), logits).unwrap();
            let p = linear_pseudo_label(&l);
            let c = protos(array![[1.0, 0.0, 0.5], [0.0, 1.0, 0.0], [-1.0, 0.3, 0.2], [0.0, 0.0, 0.0]], vec![true, true, true, false]);
            let zz = Array2::from_shape_vec((4, 3), z).unwrap();
            let q = semantic_pseudo_label(&zz, &c, 0.05).q;
            let pp = blend(&p, &q.slice(ndarray::s![0..3, ..]).to_owned(), &w);
            for m in [&p, &q, &pp] {
                for row in m.rows() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                    prop_assert!(row.iter().all(|v| *v >= 0.0));
                }
            }
        }

        #[test]
        fn fixmatch_non_increasing_in_pseudo_class_probability(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let pp = array![[0.99, 0.01]];
            let l_lo = fixmatch_loss(&pp, &array![[lo, 1.0 - lo]], 0.95);
            let l_hi = fixmatch_loss(&pp, &array![[hi, 1.0 - hi]], 0.95);
            prop_assert!(l_hi <= l_lo);
        }

        #[test]
        fn semantic_argmax_scale_invariant(z in prop::collection::vec(-5.0f64..5.0, 3), scale in 0.01f64..100.0) {
            let c = protos(array![[1.0, 0.0, 0.5], [0.0, 1.0, 0.0], [-1.0, 0.3, 0.2]], vec![true; 3]);
            let zz = Array2::from_shape_vec((1, 3), z).unwrap();
            let a = semantic_pseudo_label(&zz, &c, 0.05).q;
            let b = semantic_pseudo_label(&(&zz * scale), &c, 0.05).q;
            prop_assert_eq!(argmax(a.row(0)), argmax(b.row(0)));
        }
    }
}
