//! Reference pipelines: DASO-style FixMatch (blended pseudo-labels plus
//! alignment, no contrastive term, no feature augmentation) and
//! supervised-only training. Written independently of the CLAF step so the
//! two can be compared.

use ndarray::{concatenate, s, Array2, Axis};

use crate::data::TrainBatch;
use crate::error::{ClafError, Result};
use crate::memory::MemoryEntry;
use crate::model::ViewTag;
use crate::pseudo_label::{fixmatch_loss_with_grad, to_f64};
use crate::trainer::{cross_entropy, to_f32, total_loss, LossParts, StepMetrics, StepOutput, Trainer};

pub fn daso_step(tr: &mut Trainer, batch: &TrainBatch) -> Result<StepOutput> {
    let iter = tr.iter;
    let bl = batch.labels.len();
    let bu = batch.weak.dim().0;
    let lambda_u = tr.config.loss.lambda_u;
    let lambda_align = tr.config.loss.lambda_align;
    let tau = tr.config.pseudo_label.threshold;

    let x = concatenate(Axis(0), &[batch.labeled.view(), batch.weak.view(), batch.strong.view()]).map_err(|e| {
        ClafError::ShapeMismatch {
            expected: "views with equal image shape".into(),
            actual: e.to_string(),
        }
    })?;
    let (z, cache) = tr.model.encode_train(&x)?;
    let logits = tr.model.classify(&z)?;
    let z_w = z.slice(s![bl..bl + bu, ..]).to_owned();
    let logits_w = logits.slice(s![bl..bl + bu, ..]).to_owned();

    let pseudo = tr.pseudo_labels(&z_w, &logits_w);
    let (l_cls, g_cls) = cross_entropy(&to_f64(&logits.slice(s![..bl, ..]).to_owned()), &batch.labels);
    let (l_u, g_u) = fixmatch_loss_with_grad(
        &pseudo.bundle.p_prime,
        &to_f64(&logits.slice(s![bl + bu.., ..]).to_owned()),
        tau,
    );
    let (l_align, g_align) = tr.alignment(&pseudo);
    let parts = LossParts {
        l_cls,
        l_u,
        l_align,
        l_c: 0.0,
    };
    let weights = crate::config::LossConfig {
        lambda_c: 0.0,
        ..tr.config.loss.clone()
    };
    let l_total = total_loss(&parts, &weights, iter)?;

    let z_ema = tr.model.encode(&batch.labeled, true, ViewTag::Labeled)?.z;
    for (row, &y) in z_ema.rows().into_iter().zip(&batch.labels) {
        tr.memory.push(
            y,
            MemoryEntry {
                feature: row.to_vec(),
                embedding: Vec::new(),
                confidence: 1.0,
                augmented: false,
            },
        )?;
    }

    let mut g_logits = Array2::<f32>::zeros(logits.raw_dim());
    g_logits.slice_mut(s![..bl, ..]).assign(&to_f32(&g_cls));
    if lambda_u != 0.0 {
        g_logits.slice_mut(s![bl + bu.., ..]).assign(&to_f32(&(g_u * lambda_u)));
    }
    let mut g_z = tr.model.classifier.backward(&z, &g_logits);
    if lambda_align != 0.0 {
        let mut rows = g_z.slice_mut(s![bl..bl + bu, ..]);
        rows += &to_f32(&(g_align * lambda_align));
    }
    tr.model.encoder.backward(cache, &g_z);
    let lr = tr.apply_update();

    let metrics = StepMetrics {
        iter,
        lr,
        l_cls,
        l_u,
        l_align,
        l_c: 0.0,
        l_total,
        confident_frac: pseudo.bundle.confident_fraction(),
        pseudo_label_hist: tr.pseudo_hist(&pseudo.bundle),
        queue_fill: tr.memory.fill(),
        semantic_zero_norm: pseudo.semantic.zero_norm,
        ..Default::default()
    };
    Ok(StepOutput {
        metrics,
        bundle: Some(pseudo.bundle),
        confidences: Vec::new(),
    })
}

pub fn supervised_step(tr: &mut Trainer, batch: &TrainBatch) -> Result<StepOutput> {
    let iter = tr.iter;
    let (z, cache) = tr.model.encode_train(&batch.labeled)?;
    let logits = tr.model.classify(&z)?;
    let (l_cls, g) = cross_entropy(&to_f64(&logits), &batch.labels);
    let l_total = total_loss(
        &LossParts {
            l_cls,
            ..Default::default()
        },
        &tr.config.loss,
        iter,
    )?;
    let g_z = tr.model.classifier.backward(&z, &to_f32(&g));
    tr.model.encoder.backward(cache, &g_z);
    let lr = tr.apply_update();
    Ok(StepOutput {
        metrics: StepMetrics {
            iter,
            lr,
            l_cls,
            l_total,
            queue_fill: tr.memory.fill(),
            ..Default::default()
        },
        bundle: None,
        confidences: Vec::new(),
    })
}
