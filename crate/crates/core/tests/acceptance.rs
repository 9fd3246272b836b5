//! Acceptance suite. Every criterion prints one `PASS` or `FAIL` line on
//! stdout. Criteria run one at a time so wall-clock bounds are not skewed by
//! each other; the toy training run is shared with the probe and
//! determinism criteria.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use synthface_core::align::{estimate_similarity_transform, LandmarkSet, SimilarityTransform};
use synthface_core::experiments::{
    build_probe_sets, derive_variants, probe_reference, sensitivity_probe, swap_variants, ProbeCondition, ProbeSpec,
    SwapPlan, SwapPolicy, VariantAxis,
};
use synthface_core::margin::{arcface_loss, l2_normalize_rows, ArcFaceHead, MarginConfig};
use synthface_core::nn::Encoder;
use synthface_core::sampler::{build_manifest, DatasetManifest, Expression, Gender, SamplerConfig};
use synthface_core::toy::{build_toy_set, render_aligned, toy_training, CropSet, CropSource, ToySetSpec};
use synthface_core::trainer::{fit, lr_at_epoch, make_finetune_param_groups, Model, TrainConfig};
use synthface_core::verifier::{
    evaluate_pairs, ten_fold_accuracy, DistanceRecord, EmbeddingSource, Metric, Sweep, VerificationPair,
};
use synthface_core::seed;

const GLOBAL_SEED: u64 = 2024;

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {n:>2} {status} {name}: {detail}");
    let _ = out.flush();
}

fn finish(n: usize, name: &str, failures: &[String], started: Instant, bound: Option<Duration>) {
    let elapsed = started.elapsed();
    let mut failures = failures.to_vec();
    if let Some(b) = bound {
        if elapsed > b {
            failures.push(format!("took {:.1}s, bound {:.0}s", elapsed.as_secs_f64(), b.as_secs_f64()));
        }
    }
    let detail = if failures.is_empty() {
        format!("ok in {:.2}s", elapsed.as_secs_f64())
    } else {
        failures.join("; ")
    };
    report(n, name, failures.is_empty(), &detail);
    assert!(failures.is_empty(), "criterion {n} failed: {detail}");
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn criterion_01_margin_reduces_to_normalized_softmax() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(GLOBAL_SEED, "c1"));
    let cfg = MarginConfig { margin: 0.0, scale: 1.0, easy_margin: false };
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let e = l2_normalize_rows(&random_matrix(8, 16, &mut rng).view()).0;
        let w = l2_normalize_rows(&random_matrix(10, 16, &mut rng).view()).0;
        let labels: Vec<usize> = (0..8).map(|_| rng.random_range(0..10)).collect();
        let got = arcface_loss(&e.view(), &w.view(), &labels, &cfg).unwrap();
        // Plain cross-entropy of softmax over cosines, written out directly.
        let mut oracle = 0.0;
        for i in 0..8 {
            let cos: Vec<f64> = (0..10).map(|j| (0..16).map(|k| e[(i, k)] * w[(j, k)]).sum()).collect();
            let z: f64 = cos.iter().map(|c| c.exp()).sum();
            oracle -= (cos[labels[i]].exp() / z).ln();
        }
        oracle /= 8.0;
        worst = worst.max((got - oracle).abs());
    }
    let mut f = Vec::new();
    if worst >= 1e-6 {
        f.push(format!("max abs diff {worst:e}"));
    }
    finish(1, "margin-loss reduction", &f, t0, Some(Duration::from_secs(1)));
}

#[test]
fn criterion_02_gradients_match_finite_differences() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(GLOBAL_SEED, "c2"));
    let h = 1e-6;
    let mut worst = 0.0f64;
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
    for inst in 0..20 {
        let (b, c, d) = (rng.random_range(2..6), rng.random_range(3..8), rng.random_range(4..10));
        let cfg = MarginConfig {
            margin: rng.random_range(0.1..0.6),
            scale: [1.0, 8.0, 16.0, 32.0][inst % 4],
            easy_margin: false,
        };
        let emb = random_matrix(b, d, &mut rng);
        let head = ArcFaceHead { classes: c, dim: d, weights: random_matrix(c, d, &mut rng).into_raw_vec_and_offset().0 };
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let step = head.loss_and_grad(&emb.view(), &labels, &cfg).unwrap();
        let loss = |emb: &Array2<f64>, head: &ArcFaceHead| head.loss_and_grad(&emb.view(), &labels, &cfg).unwrap().loss;
        for idx in 0..b * d {
            let (i, k) = (idx / d, idx % d);
            let (mut p, mut m) = (emb.clone(), emb.clone());
            p[(i, k)] += h;
            m[(i, k)] -= h;
            let fd = (loss(&p, &head) - loss(&m, &head)) / (2.0 * h);
            worst = worst.max(rel(step.grad_emb[(i, k)], fd));
        }
        for idx in 0..c * d {
            let (mut p, mut m) = (head.clone(), head.clone());
            p.weights[idx] += h;
            m.weights[idx] -= h;
            let fd = (loss(&emb, &p) - loss(&emb, &m)) / (2.0 * h);
            worst = worst.max(rel(step.grad_w[(idx / d, idx % d)], fd));
        }
    }
    let mut f = Vec::new();
    if worst >= 1e-4 {
        f.push(format!("max relative error {worst:e}"));
    }
    finish(2, "gradient correctness", &f, t0, Some(Duration::from_secs(30)));
}

/// Every candidate threshold checked by a full pass over the training folds.
fn brute_force_ten_fold(records: &[DistanceRecord]) -> (f64, Vec<f64>) {
    let mut thresholds = Vec::new();
    let mut accs = Vec::new();
    for f in 0..10 {
        let train: Vec<&DistanceRecord> = records.iter().filter(|r| r.pair.fold != f).collect();
        let test: Vec<&DistanceRecord> = records.iter().filter(|r| r.pair.fold == f).collect();
        let mut d: Vec<f64> = train.iter().map(|r| r.distance).collect();
        d.sort_by(f64::total_cmp);
        d.dedup();
        let mut cands = vec![d[0]];
        for w in d.windows(2) {
            cands.push((w[0] + w[1]) / 2.0);
        }
        cands.push(d[d.len() - 1] + 1.0);
        let count = |set: &[&DistanceRecord], t: f64| set.iter().filter(|r| (r.distance < t) == r.pair.same).count();
        let mut best_t = cands[0];
        let mut best_c = count(&train, best_t);
        for t in cands {
            let c = count(&train, t);
            if c > best_c {
                best_t = t;
                best_c = c;
            }
        }
        thresholds.push(best_t);
        accs.push(count(&test, best_t) as f64 / test.len() as f64);
    }
    (accs.iter().sum::<f64>() / 10.0, thresholds)
}

#[test]
fn criterion_03_protocol_matches_brute_force() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(GLOBAL_SEED, "c3"));
    // Overlapping classes, quantized so that ties occur.
    let records: Vec<DistanceRecord> = (0..60)
        .map(|i| {
            let same = i % 2 == 0;
            let centre = if same { 0.8 } else { 1.2 };
            let d = ((centre + rng.random_range(-0.5..0.5)) * 20.0f64).round() / 20.0;
            DistanceRecord {
                pair: VerificationPair { a: format!("a_{i}"), b: format!("b_{i}"), same, fold: i / 6 },
                distance: d,
            }
        })
        .collect();
    let got = ten_fold_accuracy(&records, &Sweep::Midpoints).unwrap();
    let (mean, thresholds) = brute_force_ten_fold(&records);
    let mut f = Vec::new();
    if got.mean != mean {
        f.push(format!("mean {} vs oracle {mean}", got.mean));
    }
    for (r, t) in got.folds.iter().zip(&thresholds) {
        if r.threshold != *t {
            f.push(format!("fold {} threshold {} vs oracle {t}", r.fold, r.threshold));
        }
    }
    finish(3, "protocol oracle equivalence", &f, t0, Some(Duration::from_secs(1)));
}

#[test]
fn criterion_04_alignment_recovers_similarity_transforms() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(GLOBAL_SEED, "c4"));
    let mut worst_res = 0.0f64;
    let mut worst_param = 0.0f64;
    let mut errors = 0;
    let mut done = 0;
    while done < 1000 {
        let pts: [[f64; 2]; 5] = std::array::from_fn(|_| [rng.random_range(0.0..112.0), rng.random_range(0.0..112.0)]);
        let src = LandmarkSet::new(pts);
        let spread: f64 = pts.iter().map(|p| (p[0] - src.centroid()[0]).powi(2) + (p[1] - src.centroid()[1]).powi(2)).sum();
        if spread < 100.0 {
            continue;
        }
        let (s, a) = (rng.random_range(0.2..5.0), rng.random_range(-3.1..3.1));
        let (tx, ty) = (rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0));
        let truth = SimilarityTransform::from_params(s, a, tx, ty);
        let dst = truth.apply_set(&src);
        match estimate_similarity_transform(&src, &dst) {
            Ok(est) => {
                worst_res = worst_res.max(est.max_residual(&src, &dst));
                let da = (est.rotation() - a).sin().abs();
                let t = est.translation();
                let dp = [(est.scale() - s).abs() / s, da, (t[0] - tx).abs(), (t[1] - ty).abs()];
                worst_param = dp.iter().fold(worst_param, |m, v| m.max(*v));
            }
            Err(_) => errors += 1,
        }
        done += 1;
    }
    let mut f = Vec::new();
    if errors > 0 {
        f.push(format!("{errors} estimates failed"));
    }
    if worst_res >= 1e-8 {
        f.push(format!("max residual {worst_res:e}"));
    }
    if worst_param >= 1e-8 {
        f.push(format!("max parameter error {worst_param:e}"));
    }
    finish(4, "alignment recovery", &f, t0, Some(Duration::from_secs(10)));
}

fn sampler_manifest() -> DatasetManifest {
    let cfg = SamplerConfig { identities: 5000, samples_per_identity: 20, ..SamplerConfig::default() };
    build_manifest(&cfg, seed::derive(GLOBAL_SEED, "sampler")).unwrap()
}

/// 3-sigma binomial check of `hits` out of `n` against `p`.
fn binomial(name: &str, hits: usize, n: usize, p: f64, f: &mut Vec<String>) {
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    let dev = (hits as f64 - n as f64 * p).abs();
    if dev > 3.0 * sigma {
        f.push(format!("{name}: {hits}/{n} vs p={p} ({:.2} sigma)", dev / sigma));
    }
}

/// Kolmogorov-Smirnov statistic against `U[lo, hi)`, compared with the
/// asymptotic alpha = 0.01 critical value.
fn ks_uniform(name: &str, mut v: Vec<f64>, lo: f64, hi: f64, f: &mut Vec<String>) {
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d = 0.0f64;
    for (i, x) in v.iter().enumerate() {
        let cdf = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
        d = d.max((i as f64 + 1.0) / n - cdf).max(cdf - i as f64 / n);
    }
    let crit = 1.6276 / n.sqrt();
    if d > crit {
        f.push(format!("{name}: KS D={d:.5} > {crit:.5}"));
    }
}

fn check_sampler(m: &DatasetManifest) -> Vec<String> {
    let mut f = Vec::new();
    let acc = &m.header.sampler.accessories;
    let r = &m.records;
    if r.len() != 100_000 {
        f.push(format!("{} records", r.len()));
    }
    binomial("batch-2 fraction", r.iter().filter(|s| s.variance_batch == 2).count(), r.len(), acc.batch2_fraction, &mut f);
    let b1: Vec<_> = r.iter().filter(|s| s.variance_batch == 1).collect();
    let b2: Vec<_> = r.iter().filter(|s| s.variance_batch == 2).collect();
    binomial("batch-1 makeup", b1.iter().filter(|s| s.accessories.makeup).count(), b1.len(), 0.03, &mut f);
    binomial("batch-1 occlusion", b1.iter().filter(|s| s.accessories.occlusion).count(), b1.len(), 0.025, &mut f);
    binomial("batch-1 hat", b1.iter().filter(|s| s.accessories.hat).count(), b1.len(), 0.035, &mut f);
    binomial("batch-2 makeup", b2.iter().filter(|s| s.accessories.makeup).count(), b2.len(), 0.15, &mut f);
    binomial("batch-2 occlusion", b2.iter().filter(|s| s.accessories.occlusion).count(), b2.len(), 0.50, &mut f);
    binomial("batch-2 hat", b2.iter().filter(|s| s.accessories.hat).count(), b2.len(), 0.70, &mut f);
    let random_expr = b2.iter().filter(|s| matches!(s.expression, Expression::ActionUnits { .. })).count();
    binomial("batch-2 random expression", random_expr, b2.len(), 0.50, &mut f);
    let males: Vec<_> = r.iter().filter(|s| s.identity.gender == Gender::Male).collect();
    binomial("beard | male", males.iter().filter(|s| s.accessories.beard).count(), males.len(), 0.15, &mut f);
    if r.iter().any(|s| s.identity.gender == Gender::Female && s.accessories.beard) {
        f.push("beard on a female identity".into());
    }
    binomial("glasses", r.iter().filter(|s| s.accessories.glasses).count(), r.len(), 0.15, &mut f);

    ks_uniform("hdri rotation", r.iter().map(|s| s.hdri_rotation).collect(), 0.0, 360.0, &mut f);
    ks_uniform("gaze horizontal", r.iter().map(|s| s.gaze.horizontal).collect(), -0.5, 0.5, &mut f);
    ks_uniform("gaze vertical", r.iter().map(|s| s.gaze.vertical).collect(), 0.85, 1.0, &mut f);
    ks_uniform("gaze distance", r.iter().map(|s| s.gaze.distance).collect(), 0.3, 6.0, &mut f);
    for (k, name) in ["melanin", "whiteness", "roughness", "redness"].iter().enumerate() {
        ks_uniform(&format!("hair {name}"), r.iter().map(|s| s.hair_color.values()[k]).collect(), 0.75, 1.25, &mut f);
    }

    let yaw: Vec<f64> = r.iter().map(|s| s.head_pose.yaw).collect();
    let mean = yaw.iter().sum::<f64>() / yaw.len() as f64;
    let sd = (yaw.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (yaw.len() - 1) as f64).sqrt();
    if (sd / 25.0 - 1.0).abs() > 0.02 {
        f.push(format!("yaw spread {sd:.3} not within 2% of 25"));
    }
    f
}

static SAMPLER_RUN: OnceLock<String> = OnceLock::new();

fn first_sampler_run() -> &'static String {
    SAMPLER_RUN.get_or_init(|| sampler_manifest().to_jsonl().unwrap())
}

#[test]
fn criterion_05_sampler_statistics() {
    let _g = serial();
    let t0 = Instant::now();
    let m = sampler_manifest();
    let f = check_sampler(&m);
    SAMPLER_RUN.get_or_init(|| m.to_jsonl().unwrap());
    finish(5, "sampler statistics", &f, t0, Some(Duration::from_secs(120)));
}

struct ToyRun {
    manifest: String,
    losses: Vec<f64>,
    accuracy: f64,
    elapsed: Duration,
    encoder: Encoder,
    spec: ToySetSpec,
}

fn toy_run() -> ToyRun {
    let t0 = Instant::now();
    let spec = ToySetSpec { seed: seed::derive(GLOBAL_SEED, "toy"), ..ToySetSpec::default() };
    let set = build_toy_set(&spec).unwrap();
    let (mut cfg, margin, aug) = toy_training();
    cfg.seed = seed::derive(GLOBAL_SEED, "train");
    cfg.checkpoint_every = 0;
    let trainer = fit(&set.train, &cfg, &margin, &aug, None).unwrap();
    let encoder = trainer.model.encoder.clone();
    let src = CropSource { crops: &set.eval, embedder: &encoder };
    let (report, _) = evaluate_pairs(&set.pairs, &src, Metric::L2, &Sweep::default()).unwrap();
    ToyRun {
        manifest: set.manifest.to_jsonl().unwrap(),
        losses: trainer.history().iter().map(|m| m.loss).collect(),
        accuracy: report.mean,
        elapsed: t0.elapsed(),
        encoder,
        spec,
    }
}

fn first_toy_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(toy_run)
}

#[test]
fn criterion_06_toy_end_to_end() {
    let _g = serial();
    let run = first_toy_run();
    let mut f = Vec::new();
    if run.accuracy < 0.95 {
        f.push(format!("mean accuracy {:.4} < 0.95", run.accuracy));
    }
    if run.elapsed > Duration::from_secs(15 * 60) {
        f.push(format!("took {:.0}s, bound 900s", run.elapsed.as_secs_f64()));
    }
    let pass = f.is_empty();
    let detail = if pass { format!("accuracy {:.4}, {:.0}s", run.accuracy, run.elapsed.as_secs_f64()) } else { f.join("; ") };
    report(6, "toy end-to-end", pass, &detail);
    assert!(pass, "criterion 6 failed: {}", f.join("; "));
}

#[test]
fn criterion_07_finetune_policy() {
    let _g = serial();
    let t0 = Instant::now();
    let base = 0.1;
    let cfg = TrainConfig { epochs: 24, milestones: vec![10, 18, 22], lr_decay: 0.1, base_lr: base, ..TrainConfig::default() };
    let model = Model::new(&synthface_core::nn::EncoderSpec::toy(), 5, 0).unwrap();
    let groups = make_finetune_param_groups(base, &model);
    let mut f = Vec::new();
    let lr = |name: &str| groups.iter().find(|g| g.name == name).map(|g| g.base_lr);
    if lr("backbone") != Some(base / 100.0) {
        f.push(format!("backbone lr {:?}", lr("backbone")));
    }
    if lr("head") != Some(base / 10.0) {
        f.push(format!("head lr {:?}", lr("head")));
    }
    for g in &groups {
        for epoch in 0..cfg.epochs {
            let mut expected = g.base_lr;
            for m in [10, 18, 22] {
                if epoch >= m {
                    expected *= 0.1;
                }
            }
            if g.lr_at(&cfg, epoch) != expected {
                f.push(format!("{} at epoch {epoch}: {} vs {expected}", g.name, g.lr_at(&cfg, epoch)));
            }
        }
    }
    if lr_at_epoch(&cfg, 23).unwrap() != base * 0.1 * 0.1 * 0.1 {
        f.push("schedule of the base rate".into());
    }
    finish(7, "finetune policy", &f, t0, None);
}

fn swap_run() -> (String, SwapPlan) {
    let cfg = SamplerConfig { identities: 100, samples_per_identity: 20, ..SamplerConfig::default() };
    let baseline = build_manifest(&cfg, seed::derive(GLOBAL_SEED, "sampler")).unwrap();
    let variants = derive_variants(&baseline, &VariantAxis::Glasses, None, seed::derive(GLOBAL_SEED, "variants")).unwrap();
    let policy = SwapPolicy { fraction: 0.25, axes: VariantAxis::Glasses.fields() };
    let (m, plan) = swap_variants(&baseline, &variants, &policy, seed::derive(GLOBAL_SEED, "swap")).unwrap();
    (m.to_jsonl().unwrap(), plan)
}

fn first_swap_run() -> &'static (String, SwapPlan) {
    static RUN: OnceLock<(String, SwapPlan)> = OnceLock::new();
    RUN.get_or_init(swap_run)
}

#[test]
fn criterion_08_swap_conservation() {
    let _g = serial();
    let t0 = Instant::now();
    let (manifest, plan) = first_swap_run();
    let m = DatasetManifest::parse(manifest.as_bytes(), "swapped").unwrap();
    let mut f = Vec::new();
    for (id, scenes) in m.by_identity() {
        if scenes.len() != 20 {
            f.push(format!("identity {id} has {} samples", scenes.len()));
        }
    }
    if m.by_identity().len() != 100 {
        f.push(format!("{} identities", m.by_identity().len()));
    }
    let target = 0.25 * 2000.0;
    if (plan.swapped as f64 - target).abs() > 1.0 || plan.swaps.len() != plan.swapped {
        f.push(format!("swapped {} vs {target}", plan.swapped));
    }
    let (m2, plan2) = swap_run();
    if &m2 != manifest || &plan2 != plan {
        f.push("replay differs".into());
    }
    finish(8, "swap conservation", &f, t0, None);
}

struct FixedEmbeddings(std::collections::HashMap<String, Vec<f64>>);

impl EmbeddingSource for FixedEmbeddings {
    fn embedding(&self, image_ref: &str) -> synthface_core::error::Result<Vec<f64>> {
        Ok(self.0[image_ref].clone())
    }
}

/// Mean and population deviation, two passes in long-hand.
fn two_pass(v: &[f64]) -> (f64, f64) {
    let mut sum = 0.0;
    for x in v {
        sum += x;
    }
    let mean = sum / v.len() as f64;
    let mut ss = 0.0;
    for x in v {
        ss += (x - mean) * (x - mean);
    }
    (mean, (ss / v.len() as f64).sqrt())
}

#[test]
fn criterion_09_probe_statistics() {
    let _g = serial();
    let t0 = Instant::now();
    let mut f = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(GLOBAL_SEED, "c9"));
    let mut table = std::collections::HashMap::new();
    table.insert("ref".to_string(), (0..12).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
    let mut conditions = Vec::new();
    for c in 0..6 {
        let refs: Vec<String> = (0..7).map(|k| format!("c{c}_{k}")).collect();
        for r in &refs {
            table.insert(r.clone(), (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        }
        conditions.push(ProbeCondition {
            label: format!("c{c}"),
            group: if c < 3 { "baseline" } else { "altered" }.into(),
            parameter: Some((c % 3) as f64),
            image_refs: refs,
        });
    }
    let unit = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let src = FixedEmbeddings(table.clone());
    let got = sensitivity_probe("ref", &conditions, &src).unwrap();
    let r = unit(&table["ref"]);
    for c in &conditions {
        let d: Vec<f64> = c
            .image_refs
            .iter()
            .map(|i| unit(&table[i]).iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect();
        let (mean, std) = two_pass(&d);
        match got.conditions.iter().find(|s| s.label == c.label) {
            Some(s) if (s.mean - mean).abs() <= 1e-12 && (s.std - std).abs() <= 1e-12 => {}
            Some(s) => f.push(format!("{}: {} +- {} vs oracle {mean} +- {std}", c.label, s.mean, s.std)),
            None => f.push(format!("{} missing", c.label)),
        }
    }

    let run = first_toy_run();
    let m = DatasetManifest::parse(run.manifest.as_bytes(), "toy").unwrap();
    let scene = m.records.iter().find(|s| s.identity_id as usize >= run.spec.train_identities).unwrap();
    let spec = ProbeSpec::default();
    let traits = &m.header.sampler.traits;
    let reference = probe_reference(scene, &spec);
    match build_probe_sets(&reference, &spec, traits.eyebrow_styles, traits.iris_textures, &traits.eye_colors) {
        Ok((ref_name, sets)) => {
            for set in &sets {
                if let Err(e) = set.check_controlled() {
                    f.push(e.to_string());
                }
                let crops = CropSet {
                    crops: set.scenes.iter().map(|(k, s)| (k.clone(), render_aligned(s, Some(run.spec.render_size)).unwrap())).collect(),
                };
                let src = CropSource { crops: &crops, embedder: &run.encoder };
                match sensitivity_probe(&ref_name, &set.conditions, &src) {
                    Ok(p) if p.conditions.iter().all(|c| c.mean.is_finite()) => {}
                    Ok(_) => f.push(format!("{}: non-finite distances", set.name)),
                    Err(e) => f.push(format!("{}: {e}", set.name)),
                }
            }
            if sets.is_empty() {
                f.push("no condition sets".into());
            }
        }
        Err(e) => f.push(e.to_string()),
    }
    finish(9, "probe statistics", &f, t0, None);
}

#[test]
fn criterion_10_determinism() {
    let _g = serial();
    let t0 = Instant::now();
    let mut f = Vec::new();
    if &sampler_manifest().to_jsonl().unwrap() != first_sampler_run() {
        f.push("sampler manifest differs".into());
    }
    let (m, plan) = swap_run();
    let first = first_swap_run();
    if m != first.0 || plan != first.1 {
        f.push("swap plan differs".into());
    }
    let a = first_toy_run();
    let b = toy_run();
    if a.manifest != b.manifest {
        f.push("toy manifest differs".into());
    }
    let worst = a.losses.iter().zip(&b.losses).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    if a.losses.len() != b.losses.len() || worst > 1e-6 {
        f.push(format!("loss curves differ by {worst:e}"));
    }
    finish(10, "determinism", &f, t0, None);
}
