//! One CLAF optimisation step and the state it mutates.

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{LossConfig, RunConfig};
use crate::contrastive::{confidence_vector, contrastive_loss, ContrastiveBatch};
use crate::data::TrainBatch;
use crate::error::{ClafError, Result};
use crate::feature_aug::{augment_batch, fa_probability};
use crate::memory::{ClassMemory, MemoryEntry, Prototypes};
use crate::model::{ModelState, ViewTag};
use crate::nn::{Parameters, Sgd};
use crate::pseudo_label::{
    align_loss, argmax, blend, fixmatch_loss_with_grad, linear_pseudo_label, semantic_backward,
    semantic_pseudo_label, to_f64, ClassHistogram, PseudoLabelBundle, SemanticLabels,
};
use crate::rng::{self, names, StreamRng};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    /// Full objective with contrastive loss and feature augmentation.
    #[default]
    Claf,
    /// FixMatch with blended semantic pseudo-labels and alignment only.
    Daso,
    /// Cross-entropy on the labeled batch only.
    Supervised,
}

/// `true` once `iter ≥ start_fraction · total`.
pub fn fa_active(iter: usize, total: usize, start_fraction: f64) -> bool {
    iter as f64 >= start_fraction * total as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub l_cls: f64,
    pub l_u: f64,
    pub l_align: f64,
    pub l_c: f64,
}

/// `L_cls + λ_u L_u + λ_align L_align + λ_c L_c`. Zero-weight terms are
/// left out entirely; any non-finite active term is an error naming it.
pub fn total_loss(parts: &LossParts, weights: &LossConfig, iter: usize) -> Result<f64> {
    let terms = [
        ("l_cls", parts.l_cls, 1.0),
        ("l_u", parts.l_u, weights.lambda_u),
        ("l_align", parts.l_align, weights.lambda_align),
        ("l_c", parts.l_c, weights.lambda_c),
    ];
    let mut total = 0.0;
    for (component, value, weight) in terms {
        if weight == 0.0 {
            continue;
        }
        if !value.is_finite() {
            return Err(ClafError::NonFiniteLoss { component, iter, value });
        }
        total += weight * value;
    }
    if !total.is_finite() {
        return Err(ClafError::NonFiniteLoss {
            component: "total",
            iter,
            value: total,
        });
    }
    Ok(total)
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = labels.len();
    let p = linear_pseudo_label(logits);
    let mut grad = p.clone();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        grad[[i, y]] -= 1.0;
    }
    let bf = b.max(1) as f64;
    grad.mapv_inplace(|g| g / bf);
    (loss / bf, grad)
}

pub(crate) fn to_f32(a: &Array2<f64>) -> Array2<f32> {
    a.mapv(|v| v as f32)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iter: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_u: f64,
    pub l_align: f64,
    pub l_c: f64,
    pub l_total: f64,
    /// Fraction of unlabeled samples passing the consistency mask.
    pub confident_frac: f64,
    /// Per-class counts of confident pseudo-labels in this batch.
    pub pseudo_label_hist: Vec<usize>,
    pub contrastive_active: usize,
    pub contrastive_skipped: usize,
    pub fa_count: usize,
    pub fa_skipped: bool,
    pub queue_fill: Vec<usize>,
    pub semantic_zero_norm: usize,
    pub projection_degenerate: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub metrics: StepMetrics,
    pub bundle: Option<PseudoLabelBundle>,
    /// Contrastive confidences `s` (empty for pipelines without them).
    pub confidences: Vec<f64>,
}

/// Everything a training run mutates besides the data loader.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub pipeline: Pipeline,
    pub model: ModelState,
    pub memory: ClassMemory,
    pub histogram: ClassHistogram,
    pub optimizer: Sgd,
    pub fa_rng: StreamRng,
    pub fa_probabilities: Vec<f64>,
    /// Cumulative augmented features emitted per class.
    pub fa_totals: Vec<u64>,
    /// Number of completed steps.
    pub iter: usize,
}

pub(crate) struct Pseudo {
    pub bundle: PseudoLabelBundle,
    pub semantic: SemanticLabels,
    pub protos: Prototypes,
    pub z_w: Array2<f64>,
}

impl Trainer {
    pub fn new(config: RunConfig, labeled_counts: &[usize]) -> Result<Self> {
        config.validate()?;
        let pipeline = config.trainer.pipeline;
        let k = config.data.num_classes;
        if labeled_counts.len() != k {
            return Err(ClafError::ShapeMismatch {
                expected: format!("{k} labeled class counts"),
                actual: format!("{}", labeled_counts.len()),
            });
        }
        let model = ModelState::new(config.model.clone(), k, config.data.image_shape(), config.seed)?;
        let embedding_dim = match pipeline {
            Pipeline::Claf => model.embedding_dim(),
            Pipeline::Daso | Pipeline::Supervised => 0,
        };
        let memory = ClassMemory::new(k, config.memory.capacity, model.feature_dim(), embedding_dim)?;
        Ok(Self {
            histogram: ClassHistogram::new(k, config.pseudo_label.histogram_window),
            optimizer: Sgd::new(config.optim.clone()),
            fa_rng: rng::stream(config.seed, names::FEATURE_AUG),
            fa_probabilities: fa_probability(labeled_counts),
            fa_totals: vec![0; k],
            iter: 0,
            pipeline,
            model,
            memory,
            config,
        })
    }

    pub fn total_iters(&self) -> usize {
        self.config.trainer.total_iters
    }

    pub fn fa_active(&self) -> bool {
        self.pipeline == Pipeline::Claf && fa_active(self.iter, self.total_iters(), self.config.fa.start_fraction)
    }

    /// One step of the configured pipeline.
    pub fn step(&mut self, batch: &TrainBatch) -> Result<StepOutput> {
        match self.pipeline {
            Pipeline::Claf => self.claf_step(batch),
            Pipeline::Daso => crate::baseline::daso_step(self, batch),
            Pipeline::Supervised => crate::baseline::supervised_step(self, batch),
        }
    }

    /// Linear, semantic and blended pseudo-labels for the weak view; also
    /// feeds the class histogram with this batch's confident linear labels.
    pub(crate) fn pseudo_labels(&mut self, z_w: &Array2<f32>, logits_w: &Array2<f32>) -> Pseudo {
        let cfg = &self.config.pseudo_label;
        let protos = self.memory.prototypes();
        let z_w = to_f64(z_w);
        let p_hat = linear_pseudo_label(&to_f64(logits_w));
        let semantic = semantic_pseudo_label(&z_w, &protos, cfg.proto_temperature);
        let ramp = protos.num_defined() as f64 / protos.defined.len() as f64;
        let weights = self.histogram.blend_weights(cfg.dist_temperature, ramp);
        let p_prime = blend(&p_hat, &semantic.q, &weights);
        let confident_linear: Vec<usize> = p_hat
            .rows()
            .into_iter()
            .filter(|r| r.fold(0.0f64, |a, &b| a.max(b)) >= cfg.threshold)
            .map(argmax)
            .collect();
        self.histogram.observe(&confident_linear);
        let bundle = PseudoLabelBundle::new(p_hat, semantic.q.clone(), p_prime, cfg.threshold);
        Pseudo {
            bundle,
            semantic,
            protos,
            z_w,
        }
    }

    /// Alignment loss and its gradient on the weak features; zero until every
    /// class has a prototype.
    pub(crate) fn alignment(&self, pseudo: &Pseudo) -> (f64, Array2<f64>) {
        if pseudo.protos.num_defined() < pseudo.protos.defined.len() {
            return (0.0, Array2::zeros(pseudo.z_w.raw_dim()));
        }
        let (value, grad_q) = align_loss(&pseudo.semantic.q);
        let grad = semantic_backward(
            &pseudo.z_w,
            &pseudo.protos,
            self.config.pseudo_label.proto_temperature,
            &pseudo.semantic,
            &grad_q,
        );
        (value, grad)
    }

    pub(crate) fn pseudo_hist(&self, bundle: &PseudoLabelBundle) -> Vec<usize> {
        let mut hist = vec![0; self.config.data.num_classes];
        for (c, ok) in bundle.argmax_class.iter().zip(&bundle.confident) {
            if *ok {
                hist[*c] += 1;
            }
        }
        hist
    }

    /// SGD update on θ, φ, ψ followed by the EMA update; returns the lr.
    pub(crate) fn apply_update(&mut self) -> f64 {
        let lr = self.optimizer.lr_at(self.iter, self.total_iters());
        self.optimizer.step(self.model.online_params_mut(), lr);
        self.model.ema_update();
        self.iter += 1;
        lr
    }

    fn claf_step(&mut self, batch: &TrainBatch) -> Result<StepOutput> {
        let iter = self.iter;
        let weights = self.config.loss.clone();
        let tau = self.config.pseudo_label.threshold;
        let bl = batch.labels.len();
        let bu = batch.weak.dim().0;

        let x = concatenate(Axis(0), &[batch.labeled.view(), batch.weak.view(), batch.strong.view()])
            .map_err(|e| ClafError::ShapeMismatch {
                expected: "labeled, weak and strong views with equal image shape".into(),
                actual: e.to_string(),
            })?;
        let (z, enc_cache) = self.model.encode_train(&x)?;
        let logits = self.model.classify(&z)?;
        let z_w = z.slice(s![bl..bl + bu, ..]).to_owned();
        let z_s = z.slice(s![bl + bu.., ..]).to_owned();
        let logits_l = to_f64(&logits.slice(s![..bl, ..]).to_owned());
        let logits_w = logits.slice(s![bl..bl + bu, ..]).to_owned();
        let logits_s = to_f64(&logits.slice(s![bl + bu.., ..]).to_owned());

        let pseudo = self.pseudo_labels(&z_w, &logits_w);
        let (l_cls, g_cls) = cross_entropy(&logits_l, &batch.labels);
        let (l_u, g_u) = fixmatch_loss_with_grad(&pseudo.bundle.p_prime, &logits_s, tau);
        let (l_align, g_align) = self.alignment(&pseudo);

        // Contrastive keys are the queues as they were before this step's pushes.
        let snapshot = self.memory.snapshot();
        let (proj, proj_cache) = self.model.projector.forward_train(&z_s);
        let e_s = to_f64(&proj.embeddings);
        let s_vec = confidence_vector(&pseudo.bundle.p_prime, tau);
        let contrastive = contrastive_loss(
            &ContrastiveBatch {
                e_s: e_s.view(),
                pseudo_class: &pseudo.bundle.argmax_class,
                s: &s_vec,
                queue: &snapshot,
            },
            weights.temperature,
        );
        let parts = LossParts {
            l_cls,
            l_u,
            l_align,
            l_c: contrastive.loss,
        };
        let l_total = total_loss(&parts, &weights, iter)?;

        let z_l_ema = self.model.encode(&batch.labeled, true, ViewTag::Labeled)?.z;
        let e_l_ema = self.model.project(&z_l_ema, true)?;
        let mut degenerate = proj.degenerate + e_l_ema.degenerate;
        for (i, &y) in batch.labels.iter().enumerate() {
            self.memory.push(
                y,
                MemoryEntry {
                    feature: z_l_ema.row(i).to_vec(),
                    embedding: e_l_ema.embeddings.row(i).to_vec(),
                    confidence: 1.0,
                    augmented: false,
                },
            )?;
        }
        let (mut fa_count, mut fa_skipped) = (0, false);
        if self.fa_active() {
            let z_w_ema = self.model.encode(&batch.weak, true, ViewTag::Weak)?.z;
            let outcome = augment_batch(
                &z_l_ema,
                &batch.labels,
                &z_w_ema,
                &self.fa_probabilities,
                &self.config.fa,
                &mut self.fa_rng,
            );
            fa_skipped = outcome.skipped_empty;
            fa_count = outcome.features.len();
            if fa_count > 0 {
                let z_aug = Array2::from_shape_fn((fa_count, self.model.feature_dim()), |(i, j)| {
                    outcome.features[i].z_aug[j]
                });
                let e_aug = self.model.project(&z_aug, true)?;
                degenerate += e_aug.degenerate;
                for (f, e) in outcome.features.into_iter().zip(e_aug.embeddings.rows()) {
                    self.fa_totals[f.label] += 1;
                    self.memory.push(
                        f.label,
                        MemoryEntry {
                            feature: f.z_aug,
                            embedding: e.to_vec(),
                            confidence: f.lam as f32,
                            augmented: true,
                        },
                    )?;
                }
            }
        }

        let mut g_logits = Array2::<f32>::zeros(logits.raw_dim());
        g_logits.slice_mut(s![..bl, ..]).assign(&to_f32(&g_cls));
        if weights.lambda_u != 0.0 {
            g_logits
                .slice_mut(s![bl + bu.., ..])
                .assign(&to_f32(&(g_u * weights.lambda_u)));
        }
        let mut g_z = self.model.classifier.backward(&z, &g_logits);
        if weights.lambda_align != 0.0 {
            let mut rows = g_z.slice_mut(s![bl..bl + bu, ..]);
            rows += &to_f32(&(g_align * weights.lambda_align));
        }
        if weights.lambda_c != 0.0 {
            let g_e = to_f32(&(&contrastive.grad * weights.lambda_c));
            let g_zs = self.model.projector.backward(proj_cache, &g_e);
            let mut rows = g_z.slice_mut(s![bl + bu.., ..]);
            rows += &g_zs;
        }
        self.model.encoder.backward(enc_cache, &g_z);
        let lr = self.apply_update();

        let metrics = StepMetrics {
            iter,
            lr,
            l_cls,
            l_u,
            l_align,
            l_c: contrastive.loss,
            l_total,
            confident_frac: pseudo.bundle.confident_fraction(),
            pseudo_label_hist: self.pseudo_hist(&pseudo.bundle),
            contrastive_active: contrastive.active,
            contrastive_skipped: contrastive.skipped,
            fa_count,
            fa_skipped,
            queue_fill: self.memory.fill(),
            semantic_zero_norm: pseudo.semantic.zero_norm,
            projection_degenerate: degenerate,
        };
        Ok(StepOutput {
            metrics,
            bundle: Some(pseudo.bundle),
            confidences: s_vec,
        })
    }

    /// Parameter count of the online networks.
    pub fn num_params(&self) -> usize {
        self.model.encoder.num_params() + self.model.classifier.num_params() + self.model.projector.num_params()
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn fa_schedule_boundaries() {
        assert!(!fa_active(79, 100, 0.8));
        assert!(fa_active(80, 100, 0.8));
        assert!(fa_active(4000, 5000, 0.8));
        assert!(!fa_active(3999, 5000, 0.8));
        assert!(fa_active(0, 100, 0.0));
        assert!(!fa_active(99, 100, 1.0));
    }

    #[test]
    fn total_loss_arithmetic_and_errors() {
        let w = LossConfig::default();
        let ones = LossParts {
            l_cls: 1.0,
            l_u: 1.0,
            l_align: 1.0,
            l_c: 1.0,
        };
        assert_eq!(total_loss(&ones, &w, 0).unwrap(), 4.0);
        let nan = LossParts {
            l_c: f64::NAN,
            ..ones
        };
        match total_loss(&nan, &w, 7) {
            Err(ClafError::NonFiniteLoss { component, iter, .. }) => {
                assert_eq!(component, "l_c");
                assert_eq!(iter, 7);
            }
            other => panic!("{other:?}"),
        }
        let off = LossConfig {
            lambda_c: 0.0,
            ..w
        };
        assert_eq!(total_loss(&nan, &off, 0).unwrap(), 3.0);
    }

    #[test]
    fn cross_entropy_matches_closed_form() {
        let (l, g) = cross_entropy(&array![[2f64.ln(), 0.0]], &[1]);
        assert!((l - 3f64.ln()).abs() < 1e-15);
        assert!((g[[0, 0]] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g[[0, 1]] + 2.0 / 3.0).abs() < 1e-15);
    }
}
