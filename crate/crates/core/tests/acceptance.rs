//! End-to-end acceptance checks. Each test prints one PASS/FAIL line that
//! bypasses output capture, so the summary is visible in a plain
//! `cargo test` log.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use taskfuse::divergence::{divergence, DivergenceKind, Metric, ProbabilityVector};
use taskfuse::eval::{
    dec_fit, dec_soft_assign, dec_target_distribution, embed, linear_probe, nmi, DecConfig, ProbeConfig,
};
use taskfuse::gradcheck::run_suite;
use taskfuse::harness::{
    checkpoint_dir, coefficient_of_variation, load_dataset, run_pretrain, run_transfer, ExperimentConfig,
    PretrainOutcome,
};
use taskfuse::pretext::TaskId;
use taskfuse::seed::derive_seed;
use taskfuse::store::{manifest_without_timestamp, SnapshotRing, TENSOR_DIR};
use taskfuse::tensor::{DType, ParameterSet, Tensor};
use taskfuse::transfer::fsp_matrix;
use taskfuse::tte::{
    canberra, ensemble_step, moving_average, task_gradient, temporal_gradient, update_coefficients, DeltaMode,
    EnsembleCoefficients, LayerPolicy, LossLedger,
};

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "acceptance criterion {n:>2} {name:<28} {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_distribution(r: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let sparse = r.random_bool(0.3);
    let mut v: Vec<f64> = (0..dim)
        .map(|_| if sparse && r.random_bool(0.4) { 0.0 } else { r.random::<f64>().powi(3) })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        v[r.random_range(0..dim)] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

#[test]
fn c01_divergence_suite() {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst = BTreeMap::<&str, f64>::new();
    let mut failures = Vec::new();
    let mut note = |key: &'static str, excess: f64, what: String| {
        let w = worst.entry(key).or_insert(f64::NEG_INFINITY);
        *w = w.max(excess);
        if excess > 0.0 && failures.len() < 5 {
            failures.push(what);
        }
    };
    for i in 0..1000 {
        let dim = r.random_range(2..=32);
        let p = ProbabilityVector::new(random_distribution(&mut r, dim)).unwrap();
        let q = ProbabilityVector::new(random_distribution(&mut r, dim)).unwrap();
        let mut vals = HashMap::new();
        for m in Metric::ALL {
            let k = DivergenceKind::from(m);
            let d = divergence(k, &p, &q).unwrap();
            let s = divergence(k, &p, &p).unwrap();
            note("non-negative", -1e-12 - d, format!("pair {i} {m}: {d}"));
            note("self", s.abs() - 1e-9, format!("pair {i} {m} self: {s}"));
            vals.insert(m, d);
        }
        note("hellinger<=1", vals[&Metric::Hellinger] - 1.0, format!("pair {i} hellinger"));
        note("jsd<=ln2", vals[&Metric::Jsd] - (2f64.ln() + 1e-12), format!("pair {i} jsd"));
        let jeffrey = vals[&Metric::Kld] + vals[&Metric::ReverseKld];
        note(
            "jeffrey",
            (vals[&Metric::Jeffrey] - jeffrey).abs() - 1e-12,
            format!("pair {i} jeffrey"),
        );
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(60);
    report(
        1,
        "divergence suite",
        pass,
        &format!("1000 pairs x 7 metrics in {:.2}s {failures:?}", elapsed.as_secs_f64()),
    );
}

fn random_element(r: &mut ChaCha8Rng) -> f64 {
    loop {
        let v = match r.random_range(0..5) {
            0 => 0.0,
            1 => r.random_range(-1.0..1.0),
            2 => Normal::new(0.0, 1e3).unwrap().sample(r),
            3 => f64::from_bits(r.next_u64()),
            _ => f64::MAX * r.random_range(-1.0..1.0),
        };
        if v.is_finite() {
            return v;
        }
    }
}

#[test]
fn c02_canberra_bounded() {
    let mut r = rng(2);
    let mut bad = 0usize;
    let mut example = None;
    for _ in 0..1_000_000 {
        let (a, b) = (random_element(&mut r), random_element(&mut r));
        let c = canberra(a, b);
        if !(0.0..=1.0).contains(&c) {
            bad += 1;
            example.get_or_insert((a, b, c));
        }
    }
    let zero = canberra(0.0, 0.0);
    let pass = bad == 0 && zero == 0.0 && zero.is_sign_positive();
    report(
        2,
        "canberra boundedness",
        pass,
        &format!("1e6 pairs, {bad} outside [0,1] {example:?}, (0,0) -> {zero}"),
    );
}

struct Fixture {
    prev: ParameterSet,
    trained: BTreeMap<TaskId, ParameterSet>,
    policy: LayerPolicy,
    order: Vec<TaskId>,
}

fn random_set(r: &mut ChaCha8Rng, layout: &[(String, Vec<usize>)], dtype: DType) -> ParameterSet {
    let mut p = ParameterSet::new("fixture");
    for (name, shape) in layout {
        let n = shape.iter().product();
        let data = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        p.insert(name.clone(), Tensor::new(shape.clone(), data, dtype).unwrap());
    }
    p
}

fn fixture(r: &mut ChaCha8Rng, tasks: &[TaskId], dtype: DType) -> Fixture {
    let layers = r.random_range(1..=4);
    let mut layout = Vec::new();
    for l in 0..layers {
        let (cin, cout) = (r.random_range(1..=24), r.random_range(1..=8));
        layout.push((format!("layer{l}.weight"), vec![cin, cout]));
        layout.push((format!("layer{l}.bias"), vec![cout]));
    }
    let mut selected: Vec<String> = (0..layers).filter(|_| r.random_bool(0.6)).map(|l| format!("layer{l}")).collect();
    if selected.is_empty() {
        selected.push("layer0".into());
    }
    let prev = random_set(r, &layout, dtype);
    let trained = tasks.iter().map(|&t| (t, random_set(r, &layout, dtype))).collect();
    let mut order = tasks.to_vec();
    for i in (1..order.len()).rev() {
        order.swap(i, r.random_range(0..=i));
    }
    Fixture {
        prev,
        trained,
        policy: LayerPolicy::new(selected),
        order,
    }
}

/// Element-by-element reference of one ensemble step.
fn naive_step(f: &Fixture, c: &EnsembleCoefficients, mode: DeltaMode) -> BTreeMap<String, Vec<f64>> {
    let first = &f.trained[&f.order[0]];
    let last = &f.trained[f.order.last().unwrap()];
    let mut out = BTreeMap::new();
    for (name, prev) in f.prev.iter() {
        let layer = name.split('.').next().unwrap();
        if !f.policy.contains(layer) {
            out.insert(name.clone(), last.get(name).unwrap().data().to_vec());
            continue;
        }
        let mut v = Vec::new();
        for i in 0..prev.len() {
            let p = prev.data()[i];
            let mut w = p;
            for (task, alpha) in &c.alpha {
                let k = f.trained[task].get(name).unwrap().data()[i];
                let d = match mode {
                    DeltaMode::Absolute => (k - p).abs(),
                    DeltaMode::Signed => k - p,
                };
                w += alpha * d;
            }
            let (a, b) = (first.get(name).unwrap().data()[i], last.get(name).unwrap().data()[i]);
            let o = if a == 0.0 && b == 0.0 { 0.0 } else { (a - b).abs() / (a.abs() + b.abs()) };
            w += c.beta * o;
            v.push(w);
        }
        out.insert(name.clone(), v);
    }
    out
}

fn max_abs_diff(p: &ParameterSet, reference: &BTreeMap<String, Vec<f64>>) -> f64 {
    let mut worst = 0.0f64;
    for (name, t) in p.iter() {
        for (a, b) in t.data().iter().zip(&reference[name]) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

#[test]
fn c03_tte_oracle_equivalence() {
    let tasks = [TaskId::Reconstruction, TaskId::Colorization, TaskId::Jigsaw];
    let mut r = rng(3);
    let mut worst_step = 0.0f64;
    let mut worst_avg = 0.0f64;
    for i in 0..100 {
        let f = fixture(&mut r, &tasks, DType::F64);
        let alpha = tasks.iter().map(|&t| (t, r.random_range(0.05..1.5))).collect();
        let c = EnsembleCoefficients::new(alpha, r.random_range(1e-4..0.5), 0.5).unwrap();
        let mode = if i % 2 == 0 { DeltaMode::Absolute } else { DeltaMode::Signed };
        let deltas = f
            .trained
            .iter()
            .map(|(k, p)| (*k, temporal_gradient(p, &f.prev, &f.policy, mode).unwrap()))
            .collect();
        let first = &f.trained[&f.order[0]];
        let last = &f.trained[f.order.last().unwrap()];
        let td = task_gradient(first, last, &f.policy).unwrap();
        let fused = ensemble_step(&f.prev, &deltas, &td, &c, &f.policy, last).unwrap();
        worst_step = worst_step.max(max_abs_diff(&fused, &naive_step(&f, &c, mode)));

        let capacity = r.random_range(1..=5);
        let pushes = r.random_range(1..=8);
        let mut ring = SnapshotRing::new(capacity).unwrap();
        let mut history = Vec::new();
        for e in 0..pushes {
            let layout: Vec<(String, Vec<usize>)> = f.prev.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
            let snap = random_set(&mut r, &layout, DType::F64);
            ring.push(e as u64 + 1, snap.clone()).unwrap();
            history.push(snap);
        }
        let window = &history[history.len().saturating_sub(capacity)..];
        let mut reference = BTreeMap::new();
        for (name, t) in f.prev.iter() {
            let mean = (0..t.len())
                .map(|j| window.iter().map(|s| s.get(name).unwrap().data()[j]).sum::<f64>() / window.len() as f64)
                .collect();
            reference.insert(name.clone(), mean);
        }
        worst_avg = worst_avg.max(max_abs_diff(&moving_average(&ring).unwrap(), &reference));
    }

    let mut telescoping = true;
    for _ in 0..100 {
        let f = fixture(&mut r, &[TaskId::Segmentation], DType::F32);
        let c = EnsembleCoefficients {
            alpha: BTreeMap::from([(TaskId::Segmentation, 1.0)]),
            beta: 0.0,
            m_max: 0.5,
        };
        let k = &f.trained[&TaskId::Segmentation];
        let deltas = BTreeMap::from([(
            TaskId::Segmentation,
            temporal_gradient(k, &f.prev, &f.policy, DeltaMode::Signed).unwrap(),
        )]);
        let td = task_gradient(k, k, &f.policy).unwrap();
        telescoping &= ensemble_step(&f.prev, &deltas, &td, &c, &f.policy, k).unwrap() == *k;
    }
    let pass = worst_step <= 1e-6 && worst_avg <= 1e-6 && telescoping;
    report(
        3,
        "tte oracle equivalence",
        pass,
        &format!("ensemble max-abs {worst_step:.2e}, moving average max-abs {worst_avg:.2e}, telescoping exact: {telescoping}"),
    );
}

fn ledger(tasks: &[TaskId], loss: impl Fn(u64) -> f64, epochs: u64) -> LossLedger {
    let mut l = LossLedger::new();
    for t in 1..=epochs {
        let losses = tasks.iter().map(|&k| (k, loss(t))).collect();
        l.record(t, losses, tasks).unwrap();
    }
    l
}

fn replay(l: &LossLedger, tasks: &[TaskId], epochs: u64) -> Vec<EnsembleCoefficients> {
    let mut c = EnsembleCoefficients::initial(tasks);
    let mut out = vec![c.clone()];
    for t in 2..=epochs {
        c = update_coefficients(&c, l, t).unwrap();
        out.push(c.clone());
    }
    out
}

#[test]
fn c04_coefficient_schedule_replay() {
    let tasks = TaskId::ALL;
    let epochs = 10;
    let mut worst = 0.0f64;
    let mut check = |got: &[EnsembleCoefficients], alpha_factor: &dyn Fn(u64) -> f64, beta_factor: &dyn Fn(u64) -> f64| {
        for (i, c) in got.iter().enumerate() {
            let t = i as u64 + 1;
            for (k, a) in &c.alpha {
                let a0 = if *k == TaskId::Reconstruction { 0.4 } else { 0.2 };
                worst = worst.max((a - a0 * alpha_factor(t)).abs());
            }
            worst = worst.max((c.beta - 5e-3 * beta_factor(t)).abs());
        }
    };
    // falling by 0.1 per epoch: every task divides by 0.9, the four-task total
    // falls by 0.4 and divides by 0.6
    let falling = replay(&ledger(&tasks, |t| 1.0 - 0.1 * (t - 1) as f64, epochs), &tasks, epochs);
    check(&falling, &|t| (1.0 / 0.9f64).powi(t as i32 - 1), &|t| (1.0 / 0.6f64).powi(t as i32 - 1));
    let rising = replay(&ledger(&tasks, |t| 1.0 + 0.1 * (t - 1) as f64, epochs), &tasks, epochs);
    check(&rising, &|_| 1.0, &|_| 1.0);
    // drops of 0.5 on even epochs hit the clamp exactly: coefficients double
    let swing = |t: u64| if t % 2 == 0 { 0.5 } else { 1.0 };
    let oscillating = replay(&ledger(&tasks, swing, epochs), &tasks, epochs);
    check(&oscillating, &|t| 2f64.powi((t / 2) as i32), &|t| 2f64.powi((t / 2) as i32));

    let mut single = LossLedger::new();
    single.record(1, BTreeMap::from([(TaskId::Segmentation, 5.0)]), &[TaskId::Segmentation]).unwrap();
    single.record(2, BTreeMap::from([(TaskId::Segmentation, 1.0)]), &[TaskId::Segmentation]).unwrap();
    let c0 = EnsembleCoefficients::new(BTreeMap::from([(TaskId::Segmentation, 0.2)]), 5e-3, 0.5).unwrap();
    let clamped = update_coefficients(&c0, &single, 2).unwrap();
    worst = worst.max((clamped.alpha[&TaskId::Segmentation] - 0.4).abs());

    let mut r = rng(4);
    let mut monotone = true;
    let mut constant = true;
    for _ in 0..1000 {
        let mut l = LossLedger::new();
        let mut c = EnsembleCoefficients::initial(&tasks);
        for t in 1..=epochs {
            let losses = tasks.iter().map(|&k| (k, r.random_range(0.0..3.0))).collect();
            l.record(t, losses, &tasks).unwrap();
            if t == 1 {
                continue;
            }
            let next = update_coefficients(&c, &l, t).unwrap();
            for k in tasks {
                monotone &= next.alpha[&k] >= c.alpha[&k];
                if l.loss(t, k).unwrap() >= l.loss(t - 1, k).unwrap() {
                    constant &= next.alpha[&k] == c.alpha[&k];
                }
            }
            monotone &= next.beta >= c.beta;
            if l.total(t).unwrap() >= l.total(t - 1).unwrap() {
                constant &= next.beta == c.beta;
            }
            c = next;
        }
    }
    let pass = worst <= 1e-12 && monotone && constant;
    report(
        4,
        "coefficient schedule replay",
        pass,
        &format!("max deviation {worst:.2e}, monotone: {monotone}, constant on non-decreasing loss: {constant}"),
    );
}

#[test]
fn c05_gradient_checks() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for dtype in [DType::F32, DType::F64] {
        let cases = run_suite(dtype, 7).unwrap();
        let bound = if dtype == DType::F64 { 1e-4 } else { 1e-3 };
        let worst = cases.iter().map(|c| c.relative_error).fold(0.0, f64::max);
        let failed: Vec<&str> = cases
            .iter()
            .filter(|c| !(c.relative_error <= bound && c.inputs <= 5000))
            .map(|c| c.name.as_str())
            .collect();
        pass &= failed.is_empty() && cases.len() == 21;
        lines.push(format!("{dtype:?}: {} cases, worst {worst:.1e}, failed {failed:?}", cases.len()));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(300);
    report(
        5,
        "gradient checks",
        pass,
        &format!("{} in {:.1}s", lines.join("; "), elapsed.as_secs_f64()),
    );
}

#[test]
fn c06_fsp_brute_force() {
    let mut r = rng(6);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (h, w) = (r.random_range(1..=9), r.random_range(1..=9));
        let (m, n) = (r.random_range(1..=12), r.random_range(1..=12));
        let a: Vec<f64> = (0..h * w * m).map(|_| r.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..h * w * n).map(|_| r.random_range(-3.0..3.0)).collect();
        let g = fsp_matrix(
            &Tensor::new(vec![h, w, m], a.clone(), DType::F64).unwrap(),
            &Tensor::new(vec![h, w, n], b.clone(), DType::F64).unwrap(),
        )
        .unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        s += a[(y * w + x) * m + i] * b[(y * w + x) * n + j];
                    }
                }
                worst = worst.max((g.values.data()[i * n + j] - s / (h * w) as f64).abs());
            }
        }
    }
    report(6, "fsp brute force", worst <= 1e-6, &format!("50 shapes, max-abs {worst:.2e}"));
}

/// Encoder settings for the trend runs: reduced widths so three seeds of both
/// configurations fit the runtime budget on one core.
fn trend_config(seed: u64, tte: bool, dir: &Path) -> ExperimentConfig {
    let mut overrides = vec![
        format!("seed={seed}"),
        "dataset.count=5000".into(),
        "dataset.size=32".into(),
        "epochs=10".into(),
        "encoder.widths=[4, 8, 16, 16]".into(),
        "tte.mode=\"signed\"".into(),
        "batch_size=8".into(),
    ];
    if !tte {
        overrides.extend(["tte.enabled=false".into(), "tte.baseline=\"mean\"".into(), "omega.enabled=false".into()]);
    }
    let cfg = ExperimentConfig::default().with_overrides(&overrides).unwrap();
    ExperimentConfig {
        output_dir: dir.to_path_buf(),
        ..cfg
    }
}

struct TrendRun {
    cfg: ExperimentConfig,
    outcome: PretrainOutcome,
    mean_cv: f64,
}

fn mean_cv(out: &PretrainOutcome) -> f64 {
    let per_epoch: Vec<f64> = out
        .impact
        .by_epoch()
        .values()
        .map(|m| coefficient_of_variation(&m.values().copied().collect::<Vec<_>>()))
        .collect();
    per_epoch.iter().sum::<f64>() / per_epoch.len() as f64
}

/// Pretraining runs shared by the trend and representation criteria:
/// (seed, TTE with the regularizer, equal-weight baseline).
fn trend_runs() -> &'static Vec<(u64, TrendRun, TrendRun)> {
    static RUNS: OnceLock<(tempfile::TempDir, Vec<(u64, TrendRun, TrendRun)>)> = OnceLock::new();
    &RUNS
        .get_or_init(|| {
            let dir = tempfile::tempdir().unwrap();
            let runs = (0..3)
                .map(|seed| {
                    let run = |tte| {
                        let cfg = trend_config(seed, tte, dir.path());
                        let outcome = run_pretrain(&cfg).unwrap();
                        let mean_cv = mean_cv(&outcome);
                        TrendRun { cfg, outcome, mean_cv }
                    };
                    (seed, run(true), run(false))
                })
                .collect();
            (dir, runs)
        })
        .1
}

#[test]
fn c07_imbalance_trend() {
    let start = Instant::now();
    let runs = trend_runs();
    let wins = runs.iter().filter(|(_, a, b)| a.mean_cv < b.mean_cv).count();
    let detail: Vec<String> = runs
        .iter()
        .map(|(s, a, b)| format!("seed {s}: {:.4} vs {:.4}", a.mean_cv, b.mean_cv))
        .collect();
    report(
        7,
        "imbalance trend",
        wins >= 2,
        &format!("mean CV with ensemble vs baseline, {}; {wins}/3 lower ({:.0}s)", detail.join(", "), start.elapsed().as_secs_f64()),
    );
}

#[test]
fn c08_representation_sanity() {
    let runs = trend_runs();
    let mut gains = Vec::new();
    let mut detail = Vec::new();
    for (seed, run, _) in runs {
        let cfg = &run.cfg;
        let data = load_dataset(cfg).unwrap();
        let labels = data.require_labels().unwrap();
        let encoder = &run.outcome.encoder;
        let probe = |params: &ParameterSet| {
            let z = embed(encoder, params, &data).unwrap();
            linear_probe(&z, labels, 10, &ProbeConfig::default(), *seed).unwrap().test_accuracy
        };
        let fused = probe(&run.outcome.fused);
        let random = probe(&encoder.init(derive_seed(*seed, &[u64::MAX]), cfg.dtype));
        gains.push(fused - random);
        detail.push(format!("seed {seed}: {:.1}% vs {:.1}%", 100.0 * fused, 100.0 * random));
    }
    gains.sort_by(f64::total_cmp);
    let median = gains[1];
    report(
        8,
        "representation sanity",
        median >= 0.05,
        &format!("probe accuracy fused vs random init, {}; median gain {:.1} pp", detail.join(", "), 100.0 * median),
    );
}

#[test]
fn c09_dec_blobs() {
    let mut r = rng(9);
    let (n, d, k) = (600, 16, 3);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let centers: Vec<Vec<f64>> = (0..k).map(|c| (0..d).map(|j| if j % k == c { 10.0 } else { 0.0 }).collect()).collect();
    let truth: Vec<usize> = (0..n).map(|i| i % k).collect();
    let z: Vec<f64> = truth
        .iter()
        .flat_map(|&c| centers[c].clone())
        .map(|v| v + noise.sample(&mut r))
        .collect();
    let z = Tensor::new(vec![n, d], z, DType::F64).unwrap();
    let fit = dec_fit(&z, k, &DecConfig::default(), 9).unwrap();
    let score = nmi(&truth, &fit.labels).unwrap();

    let q = dec_soft_assign(&z, &fit.state.centers, fit.state.nu).unwrap();
    let p = dec_target_distribution(&q).unwrap();
    let row_err = [&q, &p]
        .iter()
        .flat_map(|t| t.data().chunks_exact(k).map(|row| (row.iter().sum::<f64>() - 1.0).abs()))
        .fold(0.0, f64::max);

    // equal cluster masses: each batch holds every cyclic shift of one row
    let mut sharpened = 0;
    for _ in 0..250 {
        let base = random_distribution(&mut r, 4);
        let rows: Vec<f64> = (0..4).flat_map(|s| (0..4).map(move |j| (s, j))).map(|(s, j)| base[(j + s) % 4]).collect();
        let q = Tensor::new(vec![4, 4], rows, DType::F64).unwrap();
        let p = dec_target_distribution(&q).unwrap();
        for (qr, pr) in q.data().chunks_exact(4).zip(p.data().chunks_exact(4)) {
            let (mq, mp) = (qr.iter().cloned().fold(0.0, f64::max), pr.iter().cloned().fold(0.0, f64::max));
            sharpened += usize::from(mp >= mq - 1e-9);
        }
    }
    // rows of independent batches, where column masses differ
    let free = Tensor::new(vec![1000, 4], (0..1000).flat_map(|_| random_distribution(&mut r, 4)).collect(), DType::F64).unwrap();
    let pf = dec_target_distribution(&free).unwrap();
    let unbalanced = free
        .data()
        .chunks_exact(4)
        .zip(pf.data().chunks_exact(4))
        .filter(|(q, p)| p.iter().cloned().fold(0.0, f64::max) >= q.iter().cloned().fold(0.0, f64::max) - 1e-9)
        .count();

    let pass = score >= 0.9 && fit.iterations <= 200 && row_err <= 1e-6 && sharpened == 1000;
    report(
        9,
        "dec on gaussian blobs",
        pass,
        &format!(
            "NMI {score:.4} after {} iterations, row-sum error {row_err:.1e}, sharpened {sharpened}/1000 balanced rows ({unbalanced}/1000 rows of one unbalanced batch)",
            fit.iterations
        ),
    );
}

fn tree_bytes(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_run(seed: u64, dir: &Path) -> ExperimentConfig {
    let cfg = ExperimentConfig::default()
        .with_overrides(&[
            format!("seed={seed}"),
            "dataset.count=400".into(),
            "epochs=2".into(),
            "encoder.widths=[4, 8, 16, 16]".into(),
            "tte.mode=\"signed\"".into(),
        ])
        .unwrap();
    ExperimentConfig {
        output_dir: dir.to_path_buf(),
        ..cfg
    }
}

#[test]
fn c10_distillation_sanity() {
    let mut detail = Vec::new();
    let mut pass = true;
    for seed in 0..3 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_run(seed, dir.path());
        let pre = run_pretrain(&cfg).unwrap();
        let teacher = checkpoint_dir(&pre.artifacts.run_dir).join(&pre.artifacts.fused.as_ref().unwrap().0);
        let before = tree_bytes(&teacher);
        let out = run_transfer(&cfg).unwrap();
        let after = tree_bytes(&teacher);
        let (a, b) = (out.report.initial_distill_loss.unwrap(), out.report.final_distill_loss.unwrap());
        let frozen = before == after && !before.is_empty();
        pass &= b < a && frozen;
        detail.push(format!("seed {seed}: {a:.4} -> {b:.4}, frozen {frozen}"));
    }
    report(10, "distillation sanity", pass, &detail.join(", "));
}

#[test]
fn c11_determinism() {
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = run_pretrain(&small_run(5, da.path())).unwrap();
    let b = run_pretrain(&small_run(5, db.path())).unwrap();
    let ids = |o: &PretrainOutcome| {
        let art = &o.artifacts;
        let mut v: Vec<_> = art.epoch_snapshots.clone();
        v.extend(art.branch_snapshots.values().cloned());
        v.extend(art.header_snapshots.values().cloned());
        v
    };
    let mut same = ids(&a) == ids(&b) && a.ledger == b.ledger;
    let (ca, cb) = (checkpoint_dir(&a.artifacts.run_dir), checkpoint_dir(&b.artifacts.run_dir));
    for id in ids(&a) {
        same &= manifest_without_timestamp(&id, &ca).unwrap() == manifest_without_timestamp(&id, &cb).unwrap();
        same &= tree_bytes(&ca.join(&id.0).join(TENSOR_DIR)) == tree_bytes(&cb.join(&id.0).join(TENSOR_DIR));
    }
    for file in [a.artifacts.loss_ledger.as_ref(), a.artifacts.impact_trace.as_ref()].into_iter().flatten() {
        let other = b.artifacts.run_dir.join(file.file_name().unwrap());
        same &= std::fs::read(file).unwrap() == std::fs::read(other).unwrap();
    }
    report(
        11,
        "determinism",
        same,
        &format!("{} snapshots, ledgers and traces compared byte for byte", ids(&a).len()),
    );
}
