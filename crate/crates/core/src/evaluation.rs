//! Test-set metrics, the median-of-last-evaluations score, multi-seed
//! aggregation, and feature export for offline visualisation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::data::{stack_images, Normalization, SourceDataset};
use crate::error::{ClafError, Result};
use crate::model::{ModelState, ViewTag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iter: usize,
    pub top1: f64,
    pub per_class: Vec<f64>,
    /// Mean accuracy over the `k` least common training classes.
    pub tail: f64,
    pub tail_classes: Vec<usize>,
}

/// The `k` classes with the fewest labeled training samples (ties broken
/// towards the larger class index).
pub fn tail_classes(labeled_counts: &[usize], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..labeled_counts.len()).collect();
    order.sort_by(|&a, &b| labeled_counts[a].cmp(&labeled_counts[b]).then(b.cmp(&a)));
    order.truncate(k.min(labeled_counts.len()));
    order.sort_unstable();
    order
}

impl EvalRecord {
    pub fn from_predictions(
        iter: usize,
        predictions: &[usize],
        labels: &[usize],
        num_classes: usize,
        tail: &[usize],
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(ClafError::EmptyTestSet);
        }
        let mut hits = vec![0usize; num_classes];
        let mut totals = vec![0usize; num_classes];
        let mut correct = 0;
        for (&p, &y) in predictions.iter().zip(labels) {
            if y >= num_classes {
                return Err(ClafError::ClassOutOfRange { class: y, num_classes });
            }
            totals[y] += 1;
            if p == y {
                hits[y] += 1;
                correct += 1;
            }
        }
        let per_class: Vec<f64> = hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect();
        let tail_acc = if tail.is_empty() {
            0.0
        } else {
            tail.iter().map(|&c| per_class[c]).sum::<f64>() / tail.len() as f64
        };
        Ok(Self {
            iter,
            top1: correct as f64 / labels.len() as f64,
            per_class,
            tail: tail_acc,
            tail_classes: tail.to_vec(),
        })
    }
}

fn argmax_f32(row: ndarray::ArrayView1<f32>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_classes(model: &ModelState, test: &dyn SourceDataset) -> Result<()> {
    if test.num_classes() != model.num_classes {
        return Err(ClafError::ConfigMismatch {
            stored: format!("{} classes", model.num_classes),
            actual: format!("{} classes in {}", test.num_classes(), test.name()),
        });
    }
    Ok(())
}

/// EMA encoder + EMA classifier predictions over `test`, in batches.
pub fn predict(model: &ModelState, test: &dyn SourceDataset, norm: &Normalization, batch: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(test.len());
    let batch = batch.max(1);
    for start in (0..test.len()).step_by(batch) {
        let images: Vec<_> = (start..(start + batch).min(test.len())).map(|i| test.image(i)).collect();
        let x = stack_images(&images, norm);
        let z = model.encode(&x, true, ViewTag::Labeled)?.z;
        let logits = model.classify_ema(&z)?;
        preds.extend(logits.rows().into_iter().map(argmax_f32));
    }
    Ok(preds)
}

pub fn evaluate(
    model: &ModelState,
    test: &dyn SourceDataset,
    norm: &Normalization,
    labeled_counts: &[usize],
    cfg: &EvalConfig,
    iter: usize,
) -> Result<EvalRecord> {
    check_classes(model, test)?;
    if test.is_empty() {
        return Err(ClafError::EmptyTestSet);
    }
    let preds = predict(model, test, norm, cfg.batch_size)?;
    let labels: Vec<usize> = (0..test.len()).map(|i| test.label(i)).collect();
    EvalRecord::from_predictions(
        iter,
        &preds,
        &labels,
        model.num_classes,
        &tail_classes(labeled_counts, cfg.tail_k),
    )
}

/// Median of the last `window` top-1 accuracies.
pub fn final_score(records: &[EvalRecord], window: usize) -> Result<f64> {
    if window == 0 || records.len() < window {
        return Err(ClafError::TooFewRecords {
            needed: window,
            available: records.len(),
        });
    }
    let mut vals: Vec<f64> = records[records.len() - window..].iter().map(|r| r.top1).collect();
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    Ok(if n % 2 == 1 {
        vals[n / 2]
    } else {
        (vals[n / 2 - 1] + vals[n / 2]) / 2.0
    })
}

/// Mean and sample standard deviation (n − 1; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-run outcome written as `summary.json` at the end of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    /// Short setting label (e.g. `cifar10lt-g100-n500`).
    pub setting: String,
    /// Method label (e.g. `claf`, `claf/no-fa`).
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub iterations: usize,
    pub evaluations: usize,
    pub final_score: Option<f64>,
    pub last_top1: Option<f64>,
    pub last_tail: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub setting: String,
    pub runs: usize,
    pub mean: f64,
    pub std: f64,
}

/// Groups summaries by (method, setting) and reports mean ± std of the
/// final score (falling back to the last accuracy when a run had too few
/// evaluations for the median window).
pub fn aggregate(summaries: &[RunSummary]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for s in summaries {
        if let Some(v) = s.final_score.or(s.last_top1) {
            groups.entry((s.method.clone(), s.setting.clone())).or_default().push(v);
        }
    }
    groups
        .into_iter()
        .map(|((method, setting), vals)| {
            let (mean, std) = mean_std(&vals);
            AggregateRow {
                method,
                setting,
                runs: vals.len(),
                mean,
                std,
            }
        })
        .collect()
}

/// CSV with one row per method and one column per setting, cells
/// `mean±std` in percent.
pub fn report_csv(rows: &[AggregateRow]) -> String {
    let mut settings: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
    settings.sort_unstable();
    settings.dedup();
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();
    let mut out = String::from("method");
    for s in &settings {
        out.push(',');
        out.push_str(s);
    }
    out.push('\n');
    for m in methods {
        out.push_str(m);
        for s in &settings {
            out.push(',');
            if let Some(r) = rows.iter().find(|r| r.method == m && r.setting == *s) {
                out.push_str(&format!("{:.2}±{:.2}", 100.0 * r.mean, 100.0 * r.std));
            }
        }
        out.push('\n');
    }
    out
}

const FEATURE_MAGIC: &[u8; 8] = b"CLAFFEAT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub rows: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub dataset: String,
    /// SHA-256 of the checkpoint file the features came from.
    pub checkpoint_sha256: String,
    pub layout: String,
}

/// Layout: 8-byte magic, u64 LE header length, JSON header, then
/// `rows × dim` little-endian f32 features (row-major) followed by `rows`
/// little-endian u32 labels.
pub fn write_features(path: &Path, header: &FeatureHeader, features: &Array2<f32>, labels: &[usize]) -> Result<()> {
    if features.nrows() != header.rows || features.ncols() != header.dim || labels.len() != header.rows {
        return Err(ClafError::ShapeMismatch {
            expected: format!("[{} × {}] features and {} labels", header.rows, header.dim, header.rows),
            actual: format!("{:?} features and {} labels", features.shape(), labels.len()),
        });
    }
    let mut w = BufWriter::new(File::create(path)?);
    let json = serde_json::to_vec(header)?;
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for v in features.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    for &l in labels {
        w.write_all(&(l as u32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<(FeatureHeader, Array2<f32>, Vec<usize>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(ClafError::Dataset(format!("{} is not a feature export", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: FeatureHeader = serde_json::from_slice(&json)?;
    let mut buf = vec![0u8; header.rows * header.dim * 4];
    r.read_exact(&mut buf)?;
    let feats: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let mut lbuf = vec![0u8; header.rows * 4];
    r.read_exact(&mut lbuf)?;
    let labels = lbuf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let features = Array2::from_shape_vec((header.rows, header.dim), feats)
        .map_err(|e| ClafError::Dataset(e.to_string()))?;
    Ok((header, features, labels))
}

/// EMA encoder features for every image of `dataset`, written with
/// [`write_features`].
pub fn export_features(
    model: &ModelState,
    dataset: &dyn SourceDataset,
    norm: &Normalization,
    checkpoint_sha256: &str,
    path: &Path,
) -> Result<FeatureHeader> {
    let n = dataset.len();
    let d = model.feature_dim();
    let mut features = Array2::<f32>::zeros((n, d));
    let batch = 256;
    for start in (0..n).step_by(batch) {
        let end = (start + batch).min(n);
        let images: Vec<_> = (start..end).map(|i| dataset.image(i)).collect();
        let z = model.encode(&stack_images(&images, norm), true, ViewTag::Labeled)?.z;
        features.slice_mut(ndarray::s![start..end, ..]).assign(&z);
    }
    let labels: Vec<usize> = (0..n).map(|i| dataset.label(i)).collect();
    let header = FeatureHeader {
        rows: n,
        dim: d,
        num_classes: dataset.num_classes(),
        dataset: dataset.name(),
        checkpoint_sha256: checkpoint_sha256.to_string(),
        layout: "f32le[rows*dim] row-major, then u32le[rows] labels".into(),
    };
    write_features(path, &header, &features, &labels)?;
    Ok(header)
}
