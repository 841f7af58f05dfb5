//! End-to-end runs: data sources, split, loader, trainer, periodic
//! evaluation, metrics log, checkpoints and the final summary.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{DataConfig, DataSource, RunConfig};
use crate::data::{
    build_splits, BatchConfig, BatchSource, CifarDataset, Loader, Normalization, SourceDataset, SplitManifest,
    SyntheticShapes,
};
use crate::error::{ClafError, Result};
use crate::evaluation::{evaluate, final_score, EvalRecord, RunSummary};
use crate::rng;
use crate::trainer::{StepMetrics, StepOutput, Trainer};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone)]
pub struct Sources {
    pub train: Arc<dyn SourceDataset>,
    pub test: Arc<dyn SourceDataset>,
}

pub fn data_root(cfg: &DataConfig) -> PathBuf {
    if cfg.root.is_empty() {
        CifarDataset::default_root()
    } else {
        PathBuf::from(&cfg.root)
    }
}

/// Training pool and balanced test set for the configured source. The
/// synthetic generator draws train and test images from disjoint streams.
pub fn load_sources(cfg: &DataConfig) -> Result<Sources> {
    match cfg.source {
        DataSource::Synthetic => {
            let make = |per_class, stream: &str| SyntheticShapes {
                num_classes: cfg.num_classes,
                per_class,
                size: cfg.synthetic_size,
                noise: cfg.synthetic_noise,
                seed: rng::stream_seed(cfg.synthetic_seed, stream),
            };
            Ok(Sources {
                train: Arc::new(make(cfg.synthetic_train_per_class, "synthetic.train")),
                test: Arc::new(make(cfg.synthetic_test_per_class, "synthetic.test")),
            })
        }
        DataSource::Cifar10 | DataSource::Cifar100 => {
            let variant = cfg.source.cifar_variant().expect("cifar source");
            let root = data_root(cfg);
            Ok(Sources {
                train: Arc::new(CifarDataset::load(&root, variant, true)?),
                test: Arc::new(CifarDataset::load(&root, variant, false)?),
            })
        }
    }
}

pub fn prepare_manifest(cfg: &RunConfig, train: &dyn SourceDataset) -> Result<SplitManifest> {
    build_splits(train, &cfg.data.split_spec(cfg.seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MetricRecord {
    Step(StepMetrics),
    Eval(EvalRecord),
}

impl MetricRecord {
    fn keep_before(&self, iteration: usize) -> bool {
        match self {
            MetricRecord::Step(m) => m.iter < iteration,
            MetricRecord::Eval(e) => e.iter <= iteration,
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub setting: String,
    pub method: String,
    /// Stop (and checkpoint) once this many steps have completed.
    pub stop_at: Option<usize>,
}

pub struct Experiment {
    pub trainer: Trainer,
    pub loader: Loader,
    pub test: Arc<dyn SourceDataset>,
    pub labeled_counts: Vec<usize>,
    pub records: Vec<EvalRecord>,
    pub normalization: Normalization,
}

fn batch_config(cfg: &RunConfig) -> BatchConfig {
    BatchConfig {
        labeled_batch: cfg.trainer.labeled_batch,
        unlabeled_batch: cfg.trainer.unlabeled_batch,
        policy: cfg.augment.clone(),
        normalization: cfg.data.normalization(),
    }
}

impl Experiment {
    pub fn new(cfg: RunConfig, sources: &Sources, manifest: &SplitManifest) -> Result<Self> {
        cfg.validate()?;
        check_manifest(&cfg, manifest)?;
        let source = BatchSource::new(sources.train.clone(), manifest, batch_config(&cfg), cfg.seed);
        let loader = Loader::new(source, cfg.trainer.prefetch);
        let labeled_counts = manifest.labeled_counts.clone();
        Ok(Self {
            normalization: cfg.data.normalization(),
            trainer: Trainer::new(cfg, &labeled_counts)?,
            loader,
            test: sources.test.clone(),
            labeled_counts,
            records: Vec::new(),
        })
    }

    /// Continues from a checkpoint; `expected` guards against resuming under
    /// a different config.
    pub fn resume(
        ckpt: &Checkpoint,
        expected: Option<&RunConfig>,
        sources: &Sources,
        manifest: &SplitManifest,
    ) -> Result<Self> {
        let trainer = ckpt.restore_trainer(expected)?;
        let cfg = trainer.config.clone();
        check_manifest(&cfg, manifest)?;
        let mut source = BatchSource::new(sources.train.clone(), manifest, batch_config(&cfg), cfg.seed);
        source.restore(ckpt.header.loader.clone());
        Ok(Self {
            normalization: cfg.data.normalization(),
            loader: Loader::new(source, cfg.trainer.prefetch),
            test: sources.test.clone(),
            labeled_counts: ckpt.header.labeled_counts.clone(),
            records: ckpt.header.records.clone(),
            trainer,
        })
    }

    pub fn step(&mut self) -> Result<StepOutput> {
        let batch = self.loader.next_batch();
        self.trainer.step(&batch)
    }

    pub fn evaluate(&self) -> Result<EvalRecord> {
        evaluate(
            &self.trainer.model,
            self.test.as_ref(),
            &self.normalization,
            &self.labeled_counts,
            &self.trainer.config.eval,
            self.trainer.iter,
        )
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.trainer, &self.loader.state(), &self.labeled_counts, &self.records)
    }

    /// Trains to `total_iters` (or `opts.stop_at`), evaluating every
    /// `eval.interval` steps.
    pub fn run(&mut self, opts: &RunOptions) -> Result<RunSummary> {
        let started = Instant::now();
        let total = self.trainer.total_iters();
        let stop = opts.stop_at.unwrap_or(total).min(total);
        let interval = self.trainer.config.eval.interval;
        let mut log = match &opts.out_dir {
            Some(dir) => Some(open_metrics(dir, self.trainer.iter)?),
            None => None,
        };
        let ckpt_path = opts.out_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
        while self.trainer.iter < stop {
            let out = self.step()?;
            if let Some(w) = log.as_mut() {
                write_record(w, &MetricRecord::Step(out.metrics))?;
            }
            let done = self.trainer.iter;
            if done % interval == 0 || done == total {
                let rec = self.evaluate()?;
                log::info!(
                    "iter {done}/{total} top1 {:.4} tail {:.4} ({:.0}s)",
                    rec.top1,
                    rec.tail,
                    started.elapsed().as_secs_f64()
                );
                if let Some(w) = log.as_mut() {
                    write_record(w, &MetricRecord::Eval(rec.clone()))?;
                    w.flush()?;
                }
                self.records.push(rec);
                if let (Some(p), true) = (&ckpt_path, self.trainer.config.trainer.checkpoint) {
                    self.save_checkpoint(p)?;
                }
            }
        }
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        if let Some(p) = &ckpt_path {
            self.save_checkpoint(p)?;
        }
        let cfg = &self.trainer.config;
        let summary = RunSummary {
            setting: opts.setting.clone(),
            method: opts.method.clone(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            iterations: self.trainer.iter,
            evaluations: self.records.len(),
            final_score: final_score(&self.records, cfg.eval.window).ok(),
            last_top1: self.records.last().map(|r| r.top1),
            last_tail: self.records.last().map(|r| r.tail),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = &opts.out_dir {
            std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
        }
        Ok(summary)
    }
}

fn check_manifest(cfg: &RunConfig, manifest: &SplitManifest) -> Result<()> {
    let expected = cfg.data.split_spec(cfg.seed);
    if manifest.spec != expected {
        return Err(ClafError::ConfigMismatch {
            stored: format!("{:?}", manifest.spec),
            actual: format!("{expected:?}"),
        });
    }
    Ok(())
}

/// Opens the metrics log for appending, dropping records past `iteration`
/// (left behind by a run that continued after its last checkpoint).
fn open_metrics(dir: &Path, iteration: usize) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(METRICS_FILE);
    if iteration == 0 {
        return Ok(BufWriter::new(File::create(&path)?));
    }
    // Kept lines are copied verbatim; re-serializing parsed floats is not
    // guaranteed to reproduce the original text.
    let mut kept = Vec::new();
    if path.exists() {
        for line in BufReader::new(File::open(&path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: MetricRecord = serde_json::from_str(&line)?;
            if rec.keep_before(iteration) {
                kept.push(line);
            }
        }
    }
    let mut w = BufWriter::new(File::create(&path)?);
    for line in &kept {
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    drop(w);
    Ok(BufWriter::new(OpenOptions::new().append(true).open(&path)?))
}

fn write_record(w: &mut impl Write, rec: &MetricRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")?;
    Ok(())
}
