//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS/FAIL line in `cargo test` output.

use std::collections::VecDeque;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Beta, ContinuousCDF};

use claf::config::{preset, RunConfig};
use claf::contrastive::{contrastive_loss, ContrastiveBatch};
use claf::data::{longtail_counts, BatchConfig, BatchSource, TrainBatch};
use claf::experiment::{load_sources, prepare_manifest, read_metrics, Experiment, MetricRecord, RunOptions, METRICS_FILE};
use claf::feature_aug::{augment_batch, fa_probability, sample_lambda, FaConfig};
use claf::memory::{ClassMemory, MemoryEntry, QueueSnapshot};
use claf::model::{ModelConfig, ModelState};
use claf::trainer::{Pipeline, Trainer};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

struct Instance {
    e_s: Array2<f64>,
    classes: Vec<usize>,
    s: Vec<f64>,
    queue: QueueSnapshot,
}

fn random_instance(rng: &mut ChaCha8Rng, all_active: bool) -> Instance {
    let b = rng.random_range(1..=4);
    let k = rng.random_range(1..=3);
    let d = rng.random_range(2..=8);
    let mut embeddings = Vec::new();
    let mut confidences = Vec::new();
    for _ in 0..k {
        let n = if all_active { rng.random_range(1..=5) } else { rng.random_range(0..=5) };
        let mut m = Array2::zeros((n, d));
        for mut row in m.rows_mut() {
            row.assign(&ndarray::Array1::from(unit_vec(rng, d)));
        }
        embeddings.push(m);
        confidences.push((0..n).map(|_| rng.random_range(0.8..=1.0)).collect());
    }
    let mut e_s = Array2::zeros((b, d));
    for mut row in e_s.rows_mut() {
        row.assign(&ndarray::Array1::from(unit_vec(rng, d)));
    }
    let classes = (0..b).map(|_| rng.random_range(0..k)).collect();
    let s = (0..b)
        .map(|_| {
            if !all_active && rng.random_bool(0.3) {
                0.0
            } else {
                rng.random_range(0.951..=1.0)
            }
        })
        .collect();
    Instance {
        e_s,
        classes,
        s,
        queue: QueueSnapshot {
            embeddings,
            confidences,
        },
    }
}

/// Direct double sum over samples and positives with an explicit softmax
/// denominator over every queued key.
fn brute_force_loss(inst: &Instance, t: f64) -> f64 {
    let b = inst.e_s.nrows();
    let mut keys: Vec<Vec<f64>> = Vec::new();
    for emb in &inst.queue.embeddings {
        for r in emb.rows() {
            keys.push(r.to_vec());
        }
    }
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for i in 0..b {
        let e = inst.e_s.row(i).to_vec();
        let c = inst.classes[i];
        let pos = &inst.queue.embeddings[c];
        if inst.s[i] == 0.0 || pos.nrows() == 0 {
            continue;
        }
        let denom: f64 = keys.iter().map(|k| (dot(&e, k) / t).exp()).sum();
        let mut acc = 0.0;
        for (p, row) in pos.rows().into_iter().enumerate() {
            let w = inst.s[i] * inst.queue.confidences[c][p];
            let num = (dot(&e, &row.to_vec()) / t).exp();
            acc += w * (num / denom).ln();
        }
        total += -acc / pos.nrows() as f64;
    }
    total / b as f64
}

fn loss_of(inst: &Instance, e_s: &Array2<f64>, t: f64) -> claf::contrastive::ContrastiveOutput {
    contrastive_loss(
        &ContrastiveBatch {
            e_s: e_s.view(),
            pseudo_class: &inst.classes,
            s: &inst.s,
            queue: &inst.queue,
        },
        t,
    )
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let t = 0.07;
    let mut worst = 0.0f64;
    let n = 500;
    for case in 0..n {
        let inst = random_instance(&mut rng, false);
        let got = loss_of(&inst, &inst.e_s, t).loss;
        let want = brute_force_loss(&inst, t);
        let rel = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
        worst = worst.max(rel);
        check(rel <= 1e-6, || format!("case {case}: got {got}, oracle {want}, rel {rel:.3e}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, || format!("took {secs:.2}s"))?;
    Ok(format!("{n} instances, worst rel err {worst:.2e}, {secs:.2}s"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let t = 0.07;
    let h = 1e-3;
    let mut worst = 0.0f64;
    for case in 0..20 {
        let inst = random_instance(&mut rng, true);
        let analytic = loss_of(&inst, &inst.e_s, t).grad;
        let mut fd = Array2::<f64>::zeros(inst.e_s.raw_dim());
        for idx in 0..inst.e_s.len() {
            let (i, j) = (idx / inst.e_s.ncols(), idx % inst.e_s.ncols());
            let mut plus = inst.e_s.clone();
            plus[[i, j]] += h;
            let mut minus = inst.e_s.clone();
            minus[[i, j]] -= h;
            fd[[i, j]] = (loss_of(&inst, &plus, t).loss - loss_of(&inst, &minus, t).loss) / (2.0 * h);
        }
        let diff = (&analytic - &fd).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let scale = analytic.iter().chain(fd.iter()).fold(0.0f64, |a, v| a.max(v.abs()));
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        worst = worst.max(rel);
        check(rel <= 1e-4, || format!("case {case}: rel err {rel:.3e}"))?;
    }
    Ok(format!("20 instances, worst max-norm rel err {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let counts = longtail_counts(500, 100.0, 10).map_err(|e| e.to_string())?;
    check(counts[9] == 5, || format!("tail count {}", counts[9]))?;
    let probs = fa_probability(&counts);
    let cfg = FaConfig::default();
    let mut rng = claf::rng::stream(3, claf::rng::names::FEATURE_AUG);
    let labels: Vec<usize> = (0..10).collect();
    let labeled = Array2::<f32>::from_shape_fn((10, 4), |(i, j)| (i * 4 + j) as f32);
    let unlabeled = Array2::<f32>::from_shape_fn((8, 4), |(i, j)| -((i + j) as f32));
    let steps = 10_000;
    let mut hits = vec![0usize; 10];
    for _ in 0..steps {
        for f in augment_batch(&labeled, &labels, &unlabeled, &probs, &cfg, &mut rng).features {
            hits[f.label] += 1;
        }
    }
    let rates: Vec<f64> = hits.iter().map(|&h| h as f64 / steps as f64).collect();
    check(hits[0] == 0, || format!("head class augmented {} times", hits[0]))?;
    let mut worst = 0.0f64;
    for k in 0..10 {
        let dev = (rates[k] - probs[k]).abs();
        worst = worst.max(dev);
        check(dev <= 0.02, || format!("class {k}: rate {:.4} vs P_k {:.4}", rates[k], probs[k]))?;
    }
    Ok(format!("{steps} steps, head rate 0, worst |rate − P_k| {worst:.4}"))
}

/// Asymptotic Kolmogorov survival function with the usual small-sample
/// correction to the statistic.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut sum = 0.0;
    for j in 1..=100 {
        let jf = j as f64;
        let term = (-2.0 * jf * jf * lambda * lambda).exp();
        sum += if j % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn criterion_4() -> Outcome {
    let n = 10_000;
    let alpha = FaConfig::default().alpha;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let clamped: Vec<f64> = (0..n).map(|_| sample_lambda(alpha, 0.8, &mut rng)).collect();
    let (lo, hi) = clamped
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    check(lo >= 0.8 && hi <= 1.0, || format!("μ=0.8 draws span [{lo}, {hi}]"))?;

    let beta = Beta::new(alpha, alpha).map_err(|e| e.to_string())?;
    let mut folded: Vec<f64> = (0..n).map(|_| sample_lambda(alpha, 0.5, &mut rng)).collect();
    folded.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut d = 0.0f64;
    for (i, &x) in folded.iter().enumerate() {
        let cdf = (2.0 * beta.cdf(x) - 1.0).clamp(0.0, 1.0);
        d = d.max((i as f64 + 1.0) / n as f64 - cdf).max(cdf - i as f64 / n as f64);
    }
    let p = ks_p_value(d, n);
    check(p > 0.01, || format!("KS D = {d:.4}, p = {p:.4}"))?;
    Ok(format!("μ=0.8 range [{lo:.4}, {hi:.4}]; folded KS D = {d:.4}, p = {p:.3}"))
}

fn criterion_5() -> Outcome {
    let (k, cap, fd, ed) = (3, 5, 4, 3);
    let mut mem = ClassMemory::new(k, cap, fd, ed).map_err(|e| e.to_string())?;
    let mut model: Vec<VecDeque<MemoryEntry>> = vec![VecDeque::new(); k];
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut rejected = 0;
    for op in 0..1000 {
        let class = rng.random_range(0..k + 1);
        let entry = MemoryEntry {
            feature: (0..fd).map(|_| rng.random_range(-3.0..3.0)).collect(),
            embedding: unit_vec(&mut rng, ed).into_iter().map(|v| v as f32).collect(),
            confidence: if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.8f32..1.0) },
            augmented: rng.random_bool(0.2),
        };
        if class == k {
            check(mem.push(class, entry).is_err(), || format!("op {op}: out-of-range push accepted"))?;
            rejected += 1;
        } else {
            mem.push(class, entry.clone()).map_err(|e| format!("op {op}: {e}"))?;
            let q = &mut model[class];
            if q.len() == cap {
                q.pop_front();
            }
            q.push_back(entry);
        }
        let snap = mem.snapshot();
        let protos = mem.prototypes();
        for c in 0..k {
            check(mem.entries(c) == &model[c], || format!("op {op}: class {c} order differs"))?;
            let n = model[c].len();
            check(n <= cap, || format!("op {op}: class {c} over capacity"))?;
            check(
                mem.len(c) == n && snap.embeddings[c].nrows() == n && snap.confidences[c].len() == n,
                || format!("op {op}: class {c} sizes out of lockstep"),
            )?;
            check(protos.defined[c] == (n > 0), || format!("op {op}: class {c} defined flag"))?;
            for j in 0..fd {
                let mean = if n == 0 {
                    0.0
                } else {
                    model[c].iter().rev().map(|e| e.feature[j] as f64).sum::<f64>() / n as f64
                };
                let err = (protos.centers[[c, j]] - mean).abs();
                check(err <= 1e-7, || format!("op {op}: prototype {c},{j} off by {err:e}"))?;
            }
        }
    }
    Ok(format!("1000 ops ({rejected} rejected), FIFO/lockstep/capacity/mean all hold"))
}

fn criterion_6() -> Outcome {
    let mut details = Vec::new();
    for rho in [0.9, 0.999] {
        let cfg = ModelConfig {
            ema_momentum: rho,
            ..ModelConfig::default()
        };
        let mut m = ModelState::new(cfg, 3, (8, 8, 3), 6).map_err(|e| e.to_string())?;
        let initial: Vec<Vec<f64>> = m.ema_shadow().to_vec();
        for (pi, p) in m.online_params_mut().into_iter().enumerate() {
            for (i, v) in p.value.iter_mut().enumerate() {
                *v += 0.25 * ((pi * 31 + i) as f32).sin();
            }
        }
        let theta: Vec<Vec<f64>> = m
            .online_params()
            .iter()
            .map(|p| p.value.iter().map(|&v| v as f64).collect())
            .collect();
        for _ in 0..10 {
            m.ema_update();
        }
        let r10 = rho.powi(10);
        let mut worst = 0.0f64;
        for ((shadow, t0), th) in m.ema_shadow().iter().zip(&initial).zip(&theta) {
            for ((s, a), b) in shadow.iter().zip(t0).zip(th) {
                worst = worst.max((s - (r10 * a + (1.0 - r10) * b)).abs());
            }
        }
        check(worst <= 1e-7, || format!("ρ={rho}: max deviation {worst:e}"))?;
        details.push(format!("ρ={rho}: max dev {worst:.1e}"));
    }
    Ok(details.join("; "))
}

fn criterion_7() -> Outcome {
    let err = |e: claf::ClafError| e.to_string();
    check(longtail_counts(4, 4.0, 3).map_err(err)? == vec![4, 2, 1], || "(4,4,3)".into())?;
    check(*longtail_counts(500, 100.0, 10).map_err(err)?.last().unwrap() == 5, || "(500,100,10)".into())?;
    for k in [2, 10, 100] {
        check(longtail_counts(100, 1.0, k).map_err(err)? == vec![100; k], || format!("(100,1,{k})"))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for trial in 0..1000 {
        let head = rng.random_range(1..=5000);
        let gamma = rng.random_range(1.0..=500.0);
        let k = rng.random_range(2..=100);
        let c = longtail_counts(head, gamma, k).map_err(err)?;
        check(
            c.len() == k && c[0] == head && c.windows(2).all(|w| w[0] >= w[1]) && c.iter().all(|&n| n >= 1),
            || format!("trial {trial}: ({head}, {gamma}, {k}) gave {c:?}"),
        )?;
    }
    Ok("fixed examples and 1000 random triples".into())
}

fn desk(total: usize) -> RunConfig {
    let mut cfg = preset("desk-synthetic4").unwrap();
    cfg.trainer.total_iters = total;
    cfg
}

fn criterion_8() -> Outcome {
    let cfg = desk(500);
    let tau = cfg.pseudo_label.threshold;
    let sources = load_sources(&cfg.data).map_err(|e| e.to_string())?;
    let manifest = prepare_manifest(&cfg, sources.train.as_ref()).map_err(|e| e.to_string())?;
    let mut exp = Experiment::new(cfg, &sources, &manifest).map_err(|e| e.to_string())?;
    let (mut rows, mut weighted, mut fa) = (0usize, 0usize, 0usize);
    for step in 0..500 {
        let out = exp.step().map_err(|e| format!("step {step}: {e}"))?;
        fa += out.metrics.fa_count;
        let bundle = out.bundle.ok_or("CLAF step returned no pseudo-labels")?;
        for (name, m) in [("p̂", &bundle.p_hat), ("q̂", &bundle.q_hat), ("p̂′", &bundle.p_prime)] {
            for (i, r) in m.rows().into_iter().enumerate() {
                let sum: f64 = r.sum();
                check((sum - 1.0).abs() <= 1e-6 && r.iter().all(|&v| v >= 0.0), || {
                    format!("step {step}: {name} row {i} sums to {sum}")
                })?;
            }
        }
        for (i, (r, &s)) in bundle.p_prime.rows().into_iter().zip(&out.confidences).enumerate() {
            let m = r.fold(0.0f64, |a, &b| a.max(b));
            let ok = if m <= tau { s == 0.0 } else { s == m };
            check(ok, || format!("step {step}: row {i} max {m} got weight {s}"))?;
            weighted += (s > 0.0) as usize;
            rows += 1;
        }
    }
    check(weighted > 0, || "no sample ever passed the threshold".into())?;
    Ok(format!("{rows} unlabeled rows, {weighted} weighted, {fa} FA features"))
}

fn fixed_batches(cfg: &RunConfig, n: usize) -> Result<(Vec<TrainBatch>, Vec<usize>), String> {
    let sources = load_sources(&cfg.data).map_err(|e| e.to_string())?;
    let manifest = prepare_manifest(cfg, sources.train.as_ref()).map_err(|e| e.to_string())?;
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
    Ok(((0..n).map(|_| src.next_batch()).collect(), manifest.labeled_counts))
}

fn compare_runs(a_cfg: RunConfig, b_cfg: RunConfig, steps: usize, all_terms: bool, label: &str) -> Result<(), String> {
    let (data, counts) = fixed_batches(&a_cfg, steps)?;
    let mut a = Trainer::new(a_cfg, &counts).map_err(|e| e.to_string())?;
    let mut b = Trainer::new(b_cfg, &counts).map_err(|e| e.to_string())?;
    for batch in &data {
        let ma = a.step(batch).map_err(|e| e.to_string())?.metrics;
        let mb = b.step(batch).map_err(|e| e.to_string())?.metrics;
        let pairs = [
            ("l_cls", ma.l_cls, mb.l_cls),
            ("l_u", ma.l_u, mb.l_u),
            ("l_align", ma.l_align, mb.l_align),
            ("l_total", ma.l_total, mb.l_total),
        ];
        let compared = if all_terms { &pairs[..] } else { &[pairs[0], pairs[3]][..] };
        for &(name, x, y) in compared {
            check(x.to_bits() == y.to_bits(), || format!("{label}: iter {} {name} {x} vs {y}", ma.iter))?;
        }
    }
    let core = |t: &Trainer| {
        use claf::nn::Parameters;
        let mut bits: Vec<u32> = Vec::new();
        for p in t.model.encoder.params().into_iter().chain(t.model.classifier.params()) {
            bits.extend(p.value.iter().map(|v| v.to_bits()));
        }
        bits
    };
    check(core(&a) == core(&b), || format!("{label}: encoder/classifier weights differ"))
}

fn criterion_9() -> Outcome {
    let steps = 40;
    let mut cfg = desk(steps);
    cfg.loss.lambda_c = 0.0;
    cfg.fa.start_fraction = 1.0;
    let mut daso = cfg.clone();
    daso.trainer.pipeline = Pipeline::Daso;
    compare_runs(cfg.clone(), daso, steps, true, "λ_c=0 vs DASO")?;

    cfg.loss.lambda_u = 0.0;
    cfg.loss.lambda_align = 0.0;
    cfg.fa.start_fraction = 0.5;
    let mut sup = cfg.clone();
    sup.trainer.pipeline = Pipeline::Supervised;
    compare_runs(cfg, sup, steps, false, "zero unsupervised weights vs supervised")?;
    Ok(format!("{steps} steps each: DASO and supervised-only paths bit-identical"))
}

fn criterion_10() -> Outcome {
    let cfg = preset("desk-synthetic4").map_err(|e| e.to_string())?;
    let total = cfg.trainer.total_iters;
    check(total == 5000 && cfg.data.imbalance_ratio == 10.0, || "desk preset drifted".into())?;
    check(
        cfg.data.labeled_head == 200 && cfg.data.unlabeled_head == 800 && cfg.data.synthetic_size == 32,
        || "desk preset drifted".into(),
    )?;
    let chance = 1.0 / cfg.data.num_classes as f64;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out_dir: PathBuf = dir.path().to_path_buf();
    let start = Instant::now();
    let sources = load_sources(&cfg.data).map_err(|e| e.to_string())?;
    let manifest = prepare_manifest(&cfg, sources.train.as_ref()).map_err(|e| e.to_string())?;
    let mut exp = Experiment::new(cfg, &sources, &manifest).map_err(|e| e.to_string())?;
    let summary = exp
        .run(&RunOptions {
            out_dir: Some(out_dir.clone()),
            setting: "desk-synthetic4".into(),
            method: "claf".into(),
            stop_at: None,
        })
        .map_err(|e| e.to_string())?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    check(minutes < 30.0, || format!("took {minutes:.1} min"))?;

    let records = read_metrics(&out_dir.join(METRICS_FILE)).map_err(|e| e.to_string())?;
    let steps: Vec<_> = records
        .iter()
        .filter_map(|r| match r {
            MetricRecord::Step(m) => Some(m),
            MetricRecord::Eval(_) => None,
        })
        .collect();
    check(steps.len() == total, || format!("{} step records", steps.len()))?;
    if let Some(bad) = steps.iter().find(|m| !m.l_total.is_finite()) {
        return Err(format!("non-finite total loss at iter {}", bad.iter));
    }
    let window = 500;
    let l_cls: Vec<f64> = steps.iter().map(|m| m.l_cls).collect();
    let first = l_cls[..window].iter().sum::<f64>() / window as f64;
    let last = l_cls[total - window..].iter().sum::<f64>() / window as f64;
    check(last < first, || format!("L_cls moving average {first:.4} → {last:.4}"))?;
    let top1 = summary.last_top1.ok_or("no evaluation recorded")?;
    check(top1 > 1.5 * chance, || format!("final top1 {top1:.4} ≤ 1.5 × chance"))?;
    Ok(format!(
        "{minutes:.1} min, L_cls MA {first:.4} → {last:.4}, final top1 {top1:.4} (chance {chance:.2}), final score {:.4}",
        summary.final_score.unwrap_or(f64::NAN)
    ))
}

/// The CIFAR trend comparison needs the dataset on disk and hours of CPU,
/// so it never gates; see the README for the recorded outcome.
fn criterion_11() -> Outcome {
    let cfg = preset("desk-cifar10lt").map_err(|e| e.to_string())?;
    match load_sources(&cfg.data) {
        Ok(_) => Ok("CIFAR-10 present; run `claf train --preset desk-cifar10lt` (and `--ablate no-fa`) for 3 seeds, then `claf report`".into()),
        Err(e) => Ok(format!("skipped, non-gating: {e}")),
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, bool); 11] = [
        ("contrastive loss vs brute-force oracle", criterion_1, true),
        ("contrastive gradient vs finite differences", criterion_2, true),
        ("FA per-class rates", criterion_3, true),
        ("λ clamp and folded Beta KS test", criterion_4, true),
        ("queue semantics", criterion_5, true),
        ("EMA closed form", criterion_6, true),
        ("long-tail counts", criterion_7, true),
        ("distribution sanity over 500 steps", criterion_8, true),
        ("pipeline degeneracy", criterion_9, true),
        ("desk-scale end-to-end run", criterion_10, true),
        ("CIFAR trend check", criterion_11, false),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f, gating)) in criteria.into_iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|s| s == &n.to_string()) {
            continue;
        }
        let started = Instant::now();
        let result = f();
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => {
                let tag = if gating { "PASS" } else { "INFO" };
                println!("criterion {n:>2} {tag}  {name}: {detail} [{secs:.1}s]");
            }
            Err(why) => {
                println!("criterion {n:>2} FAIL  {name}: {why} [{secs:.1}s]");
                if gating {
                    failed += 1;
                }
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    } else {
        println!("acceptance: all gating criteria passed");
        ExitCode::SUCCESS
    }
}
