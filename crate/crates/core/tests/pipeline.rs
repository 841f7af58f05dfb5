use claf::checkpoint::Checkpoint;
use claf::config::{preset, RunConfig};
use claf::data::{BatchConfig, BatchSource, TrainBatch};
use claf::experiment::{load_sources, prepare_manifest, read_metrics, Experiment, RunOptions, CHECKPOINT_FILE, METRICS_FILE};
use claf::trainer::{Pipeline, Trainer};
use claf::nn::Parameters;
use claf::ClafError;

fn desk(total: usize) -> RunConfig {
    let mut cfg = preset("desk-synthetic4").unwrap();
    cfg.trainer.total_iters = total;
    cfg.trainer.prefetch = 0;
    cfg.data.synthetic_test_per_class = 25;
    cfg
}

fn batches(cfg: &RunConfig, n: usize) -> (Vec<TrainBatch>, Vec<usize>) {
    let sources = load_sources(&cfg.data).unwrap();
    let manifest = prepare_manifest(cfg, sources.train.as_ref()).unwrap();
    let mut src = BatchSource::new(
        sources.train.clone(),
        &manifest,
        BatchConfig {
            labeled_batch: cfg.trainer.labeled_batch,
            unlabeled_batch: cfg.trainer.unlabeled_batch,
            policy: cfg.augment.clone(),
            normalization: cfg.data.normalization(),
        },
        cfg.seed,
    );
    ((0..n).map(|_| src.next_batch()).collect(), manifest.labeled_counts)
}

#[test]
fn smoke_run_has_finite_losses_and_filling_queues() {
    let cfg = desk(100);
    let sources = load_sources(&cfg.data).unwrap();
    let manifest = prepare_manifest(&cfg, sources.train.as_ref()).unwrap();
    let mut exp = Experiment::new(cfg, &sources, &manifest).unwrap();
    let mut prev = vec![0; 4];
    for _ in 0..100 {
        let m = exp.step().unwrap().metrics;
        assert!(m.l_total.is_finite() && m.l_cls.is_finite() && m.l_u.is_finite());
        for (a, b) in m.queue_fill.iter().zip(&prev) {
            assert!(a >= b);
        }
        prev = m.queue_fill;
    }
    let ema_before = exp.trainer.model.ema_hash();
    exp.evaluate().unwrap();
    assert_eq!(exp.trainer.model.ema_hash(), ema_before);
}

#[test]
fn claf_without_contrastive_or_fa_matches_daso() {
    let mut cfg = desk(40);
    cfg.loss.lambda_c = 0.0;
    cfg.fa.start_fraction = 1.0;
    let (data, counts) = batches(&cfg, 40);
    let mut claf = Trainer::new(cfg.clone(), &counts).unwrap();
    let mut daso_cfg = cfg.clone();
    daso_cfg.trainer.pipeline = Pipeline::Daso;
    let mut daso = Trainer::new(daso_cfg, &counts).unwrap();
    for b in &data {
        let a = claf.step(b).unwrap().metrics;
        let d = daso.step(b).unwrap().metrics;
        assert_eq!(a.l_cls.to_bits(), d.l_cls.to_bits(), "iter {}", a.iter);
        assert_eq!(a.l_u.to_bits(), d.l_u.to_bits(), "iter {}", a.iter);
        assert_eq!(a.l_align.to_bits(), d.l_align.to_bits(), "iter {}", a.iter);
        assert_eq!(a.l_total.to_bits(), d.l_total.to_bits(), "iter {}", a.iter);
    }
    let enc = |t: &Trainer| {
        let mut v: Vec<u32> = Vec::new();
        for p in t.model.encoder.params().into_iter().chain(t.model.classifier.params()) {
            v.extend(p.value.iter().map(|x| x.to_bits()));
        }
        v
    };
    assert_eq!(enc(&claf), enc(&daso));
}

#[test]
fn zero_unsupervised_weights_match_supervised() {
    let mut cfg = desk(30);
    cfg.loss.lambda_c = 0.0;
    cfg.loss.lambda_u = 0.0;
    cfg.loss.lambda_align = 0.0;
    let (data, counts) = batches(&cfg, 30);
    let mut claf = Trainer::new(cfg.clone(), &counts).unwrap();
    let mut sup_cfg = cfg.clone();
    sup_cfg.trainer.pipeline = Pipeline::Supervised;
    let mut sup = Trainer::new(sup_cfg, &counts).unwrap();
    for b in &data {
        let a = claf.step(b).unwrap().metrics;
        let s = sup.step(b).unwrap().metrics;
        assert_eq!(a.l_cls.to_bits(), s.l_cls.to_bits(), "iter {}", a.iter);
        assert_eq!(a.l_total.to_bits(), s.l_total.to_bits(), "iter {}", a.iter);
    }
    assert_eq!(claf.model.online_hash(), sup.model.online_hash());
    assert_eq!(claf.model.ema_hash(), sup.model.ema_hash());
}

#[test]
fn identical_seeds_give_identical_runs() {
    let cfg = desk(15);
    let (data, counts) = batches(&cfg, 15);
    let run = || {
        let mut t = Trainer::new(cfg.clone(), &counts).unwrap();
        let m: Vec<_> = data.iter().map(|b| t.step(b).unwrap().metrics).collect();
        (m, t.model.online_hash(), t.model.ema_hash())
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_is_bit_identical_to_uninterrupted_run() {
    let mut cfg = desk(60);
    cfg.eval.interval = 20;
    cfg.trainer.prefetch = 2;
    let sources = load_sources(&cfg.data).unwrap();
    let manifest = prepare_manifest(&cfg, sources.train.as_ref()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let full_dir = dir.path().join("full");
    let split_dir = dir.path().join("split");

    let mut full = Experiment::new(cfg.clone(), &sources, &manifest).unwrap();
    let opts = |d: &std::path::Path, stop_at| RunOptions {
        out_dir: Some(d.to_path_buf()),
        stop_at,
        ..Default::default()
    };
    let summary_full = full.run(&opts(&full_dir, None)).unwrap();

    let mut first = Experiment::new(cfg.clone(), &sources, &manifest).unwrap();
    first.run(&opts(&split_dir, Some(30))).unwrap();
    assert_eq!(first.trainer.iter, 30);
    drop(first);
    let ckpt = Checkpoint::read(&split_dir.join(CHECKPOINT_FILE)).unwrap();
    let mut resumed = Experiment::resume(&ckpt, Some(&cfg), &sources, &manifest).unwrap();
    let summary_split = resumed.run(&opts(&split_dir, None)).unwrap();

    assert_eq!(full.trainer.model.online_hash(), resumed.trainer.model.online_hash());
    assert_eq!(full.trainer.model.ema_hash(), resumed.trainer.model.ema_hash());
    assert_eq!(full.trainer.memory.export(), resumed.trainer.memory.export());
    assert_eq!(full.trainer.fa_totals, resumed.trainer.fa_totals);
    assert_eq!(full.records, resumed.records);
    assert_eq!(summary_full.final_score, summary_split.final_score);
    assert_eq!(
        read_metrics(&full_dir.join(METRICS_FILE)).unwrap(),
        read_metrics(&split_dir.join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn resume_under_different_config_is_rejected() {
    let cfg = desk(4);
    let sources = load_sources(&cfg.data).unwrap();
    let manifest = prepare_manifest(&cfg, sources.train.as_ref()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut exp = Experiment::new(cfg.clone(), &sources, &manifest).unwrap();
    exp.step().unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    exp.save_checkpoint(&path).unwrap();
    let ckpt = Checkpoint::read(&path).unwrap();
    let mut other = cfg.clone();
    other.loss.temperature = 0.1;
    assert!(matches!(
        Experiment::resume(&ckpt, Some(&other), &sources, &manifest),
        Err(ClafError::ConfigMismatch { .. })
    ));
    let mut reseeded = cfg.clone();
    reseeded.seed += 1;
    let other_manifest = prepare_manifest(&reseeded, sources.train.as_ref()).unwrap();
    assert!(matches!(
        Experiment::new(cfg, &sources, &other_manifest),
        Err(ClafError::ConfigMismatch { .. })
    ));
}
