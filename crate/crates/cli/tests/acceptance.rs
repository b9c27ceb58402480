//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measurements. Run with
//! `cargo test -p dbkd-cli --test acceptance -- --nocapture`.
//!
//! The desk-scale MNIST experiment (3 seeds) and the micro pipeline
//! runs are shared fixtures; on re-runs they resume from completed run
//! directories, so a green suite is cheap to reproduce.

use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use ndarray::{Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use dbkd_cli::config::ExperimentConfig;
use dbkd_cli::pipeline::{run_pipeline, RunManifest};
use dbkd_core::confidence::{
    confidence_score, pseudo_label, quantile_linear, thresholds_from_scores, ProbVector,
};
use dbkd_core::data::ImageShape;
use dbkd_core::distill::{
    generate_balanced, kd_loss, mean_entropy, standard_kd_loss, DistillError, SyntheticSource,
};
use dbkd_core::gan::test_critics::LinearCritic;
use dbkd_core::gan::{gp_on_tape, interpolate, loss_d, loss_d_new, GeneratorNet};
use dbkd_core::metrics::{coverage_rows, CoverageConfig, MetricsDoc};
use dbkd_core::nn::layers::ParamBind;
use dbkd_core::nn::{Conv2d, Layer, Linear, Sequential, Tape};
use dbkd_core::service::{serve, RemoteTeacher};
use dbkd_core::teacher::{BlackBoxTeacher, Classifier, ClassifierSidecar, InProcessTeacher};

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::from_file(&workspace_root().join("configs/mnist-desk.cfg"))
        .expect("desk preset parses")
}

fn micro_config() -> ExperimentConfig {
    ExperimentConfig::from_file(&workspace_root().join("configs/mnist-micro.cfg"))
        .expect("micro preset parses")
}

fn acceptance_root(sub: &str) -> PathBuf {
    let root = std::env::temp_dir().join("dbkd-acceptance").join(sub);
    std::fs::create_dir_all(&root).unwrap();
    root
}

fn read_metrics(run_dir: &Path) -> MetricsDoc {
    let text = std::fs::read_to_string(run_dir.join("metrics.json")).expect("metrics.json");
    serde_json::from_str(&text).expect("metrics.json parses")
}

// ---------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------

struct DeskFixture {
    run_dirs: Vec<PathBuf>,
    metrics: Vec<MetricsDoc>,
    teacher_accuracy: f64,
    teacher_epochs: usize,
    wall: Duration,
}

static DESK: OnceLock<DeskFixture> = OnceLock::new();

/// Trains the desk teacher once, then runs the full pipeline for three
/// seeds with that teacher attached (the paper's protocol: one teacher,
/// repeated student/GAN seeds).
fn desk() -> &'static DeskFixture {
    DESK.get_or_init(|| {
        let t0 = Instant::now();
        let out = acceptance_root("desk");
        let base = desk_config();

        let mut teacher_cfg = base.clone();
        teacher_cfg.master_seed = 1;
        let teacher_run = run_pipeline(&teacher_cfg, &out, true, Some("teacher"))
            .expect("teacher stage");
        let report: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(teacher_run.run_dir.join("teacher/report.json")).unwrap(),
        )
        .unwrap();
        let teacher_accuracy = report["test_accuracy"].as_f64().unwrap();
        let teacher_epochs = report["epochs"].as_u64().unwrap() as usize;
        let weights = teacher_run.run_dir.join("teacher/weights.dbkw");

        let mut run_dirs = Vec::new();
        let mut metrics = Vec::new();
        for seed in [1u64, 2, 3] {
            let mut cfg = base.clone();
            cfg.master_seed = seed;
            if seed != 1 {
                cfg.teacher_weights = Some(weights.clone());
            }
            let outcome = run_pipeline(&cfg, &out, true, None).expect("desk pipeline");
            metrics.push(read_metrics(&outcome.run_dir));
            run_dirs.push(outcome.run_dir);
        }
        DeskFixture { run_dirs, metrics, teacher_accuracy, teacher_epochs, wall: t0.elapsed() }
    })
}

struct MicroFixture {
    run_a: PathBuf,
    run_b: PathBuf,
    resumed: PathBuf,
}

static MICRO: OnceLock<MicroFixture> = OnceLock::new();

fn micro() -> &'static MicroFixture {
    MICRO.get_or_init(|| {
        let cfg = {
            let mut c = micro_config();
            c.master_seed = 5;
            c
        };
        let out_a = acceptance_root("micro-a");
        let out_b = acceptance_root("micro-b");
        let out_c = acceptance_root("micro-c");
        let a = run_pipeline(&cfg, &out_a, true, None).expect("micro run A");
        let b = run_pipeline(&cfg, &out_b, true, None).expect("micro run B");
        // Interrupt after the generation stage, then resume to the end.
        let _ = run_pipeline(&cfg, &out_c, true, Some("gan")).expect("micro run C (interrupted)");
        let c = run_pipeline(&cfg, &out_c, true, None).expect("micro run C (resumed)");
        MicroFixture { run_a: a.run_dir, run_b: b.run_dir, resumed: c.run_dir }
    })
}

// ---------------------------------------------------------------------
// Criterion 1: quantile oracle equivalence
// ---------------------------------------------------------------------

#[test]
fn c01_quantile_oracle_equivalence() {
    let t0 = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(101);
    let qs = [0.0, 0.03, 0.1, 0.5, 1.0];
    let mut max_err: f64 = 0.0;
    for _ in 0..1000 {
        let classes = rng.gen_range(2..8);
        let groups: Vec<Vec<f64>> = (0..classes)
            .map(|_| {
                let n = rng.gen_range(1..60);
                (0..n).map(|_| rng.gen_range(0.1..1.0)).collect()
            })
            .collect();
        for &q in &qs {
            let got = thresholds_from_scores(&groups, q).unwrap();
            for (k, group) in groups.iter().enumerate() {
                // independent oracle: sort, then interpolate at q*(n-1)
                let mut sorted = group.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let pos = q * (sorted.len() - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                let want = if lo == hi {
                    sorted[lo]
                } else {
                    sorted[lo] * (1.0 - (pos - lo as f64)) + sorted[hi] * (pos - lo as f64)
                };
                let err = (got.tau[k] - want).abs();
                max_err = max_err.max(err);
                assert!(err <= 1e-12, "quantile mismatch: {} vs {} at q={q}", got.tau[k], want);
            }
        }
    }
    // quantile_linear itself against the same oracle on raw arrays
    for _ in 0..1000 {
        let n = rng.gen_range(1..100);
        let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for &q in &qs {
            let pos = q * (n - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            let want = if lo == hi {
                v[lo]
            } else {
                v[lo] * (1.0 - (pos - lo as f64)) + v[hi] * (pos - lo as f64)
            };
            assert!((quantile_linear(&v, q) - want).abs() <= 1e-12);
        }
    }
    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(10), "criterion 1 runtime {dt:?} over 10s budget");
    println!("criterion 1: PASS — quantile oracle, max |err| {max_err:.2e}, {dt:?}");
}

// ---------------------------------------------------------------------
// Criterion 2: confidence core
// ---------------------------------------------------------------------

#[test]
fn c02_confidence_core() {
    let t0 = Instant::now();
    // worked example
    let p = ProbVector::new(vec![0.1, 0.7, 0.2]).unwrap();
    assert_eq!(confidence_score(&p), 0.7);
    assert_eq!(pseudo_label(&p), 1);

    // bounds on 1e5 random vectors
    let mut rng = ChaCha12Rng::seed_from_u64(102);
    for _ in 0..100_000 {
        let k = rng.gen_range(2..20);
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(1e-6..1.0)).collect();
        let sum: f64 = raw.iter().sum();
        let p = ProbVector::new(raw.into_iter().map(|v| v / sum).collect()).unwrap();
        let c = confidence_score(&p);
        assert!(c >= 1.0 / k as f64 - 1e-12 && c <= 1.0 + 1e-12, "bounds violated: {c}");
        assert_eq!(c, p.values()[pseudo_label(&p)]);
    }

    // tie-break determinism
    assert_eq!(pseudo_label(&ProbVector::new(vec![0.5, 0.5]).unwrap()), 0);
    assert_eq!(pseudo_label(&ProbVector::new(vec![0.25; 4]).unwrap()), 0);
    assert_eq!(pseudo_label(&ProbVector::new(vec![0.2, 0.4, 0.4]).unwrap()), 1);

    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(5), "criterion 2 runtime {dt:?} over 5s budget");
    println!("criterion 2: PASS — worked example, bounds on 1e5 vectors, tie-break, {dt:?}");
}

// ---------------------------------------------------------------------
// Criterion 3: loss identities
// ---------------------------------------------------------------------

#[test]
fn c03_loss_identities() {
    let t0 = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(103);
    let random_prob = |k: usize, rng: &mut ChaCha12Rng| {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.02..1.0)).collect();
        let s: f64 = raw.iter().sum();
        ProbVector::new(raw.into_iter().map(|v| v / s).collect()).unwrap()
    };

    // (a) affine in lambda + permutation invariance at lambda = 1
    for _ in 0..200 {
        let n = rng.gen_range(1..8);
        let k = rng.gen_range(2..8);
        let student: Vec<ProbVector> = (0..n).map(|_| random_prob(k, &mut rng)).collect();
        let teacher: Vec<ProbVector> = (0..n).map(|_| random_prob(k, &mut rng)).collect();
        let labels: Vec<u16> = (0..n).map(|_| rng.gen_range(0..k) as u16).collect();
        let v0 = standard_kd_loss(&student, &teacher, &labels, 0.0).unwrap();
        let v1 = standard_kd_loss(&student, &teacher, &labels, 1.0).unwrap();
        for _ in 0..4 {
            let l = rng.gen_range(0.0..1.0);
            let v = standard_kd_loss(&student, &teacher, &labels, l).unwrap();
            assert!(
                (v - ((1.0 - l) * v0 + l * v1)).abs() <= 1e-7,
                "affinity violated at lambda {l}"
            );
        }
        let mut permuted = labels.clone();
        permuted.rotate_left(1.min(n - 1));
        let vp = standard_kd_loss(&student, &teacher, &permuted, 1.0).unwrap();
        assert_eq!(v1, vp, "lambda=1 must ignore hard labels");
    }

    // (b) kd_loss - entropy(T) equals independent KL and is >= 0
    for _ in 0..500 {
        let n = rng.gen_range(1..8);
        let k = rng.gen_range(2..10);
        let student: Vec<ProbVector> = (0..n).map(|_| random_prob(k, &mut rng)).collect();
        let teacher: Vec<ProbVector> = (0..n).map(|_| random_prob(k, &mut rng)).collect();
        let gap = kd_loss(&student, &teacher) - mean_entropy(&teacher);
        let kl: f64 = teacher
            .iter()
            .zip(&student)
            .map(|(t, s)| {
                t.values()
                    .iter()
                    .zip(s.values())
                    .map(|(&tv, &sv)| if tv > 0.0 { tv * (tv / sv).ln() } else { 0.0 })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n as f64;
        assert!((gap - kl).abs() <= 1e-6, "kd - H vs KL: {gap} vs {kl}");
        assert!(gap >= -1e-9, "KL must be non-negative");
    }

    // (c) loss_d_new with empty H == loss_d on identical samples
    for trial in 0..10 {
        let mut critic = Sequential::new(vec![
            Layer::Conv(Conv2d::<f64>::new(1, 2, 3, 2, 1, &mut rng)),
            Layer::LeakyRelu(0.2),
            Layer::Flatten,
            Layer::Linear(Linear::new(2 * 4 * 4, 1, &mut rng)),
        ]);
        let real = ArrayD::from_shape_fn(IxDyn(&[6, 1, 8, 8]), |_| rng.gen_range(-1.0..1.0));
        let fake = ArrayD::from_shape_fn(IxDyn(&[6, 1, 8, 8]), |_| rng.gen_range(-1.0..1.0));
        let parts = loss_d_new(&mut critic, &fake, &real, 10.0, &mut rng).unwrap();
        let score = |c: &mut Sequential<f64>, b: &ArrayD<f64>| -> Vec<f64> {
            let mut t = Tape::<f64>::new();
            let mut bind = ParamBind::new();
            let x = t.constant(b.clone());
            let s = c.forward_train(&mut t, x, &mut bind);
            t.value(s).iter().cloned().collect()
        };
        let plain = loss_d(&score(&mut critic, &fake), &score(&mut critic, &real)).unwrap();
        assert!(
            (parts.wasserstein - plain).abs() <= 1e-6,
            "trial {trial}: {} vs {}",
            parts.wasserstein,
            plain
        );
    }

    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(30), "criterion 3 runtime {dt:?} over 30s budget");
    println!("criterion 3: PASS — affinity, KL identity, Eq5==Eq3 with empty H, {dt:?}");
}

// ---------------------------------------------------------------------
// Criterion 4: gradient penalty analytic + finite differences
// ---------------------------------------------------------------------

#[test]
fn c04_gradient_penalty_checks() {
    let t0 = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(104);

    // analytic penalties for linear critics of norm {0.5, 1, 3}
    for &norm in &[0.5f64, 1.0, 3.0] {
        let raw: ArrayD<f64> = ArrayD::from_shape_fn(IxDyn(&[16]), |_| rng.gen_range(-1.0..1.0));
        let cur = raw.mapv(|v| v * v).sum().sqrt();
        let w = raw.mapv(|v| v * norm / cur);
        let mut critic = LinearCritic { w, b: -0.4 };
        let expected = (norm - 1.0) * (norm - 1.0);
        for _ in 0..3 {
            let real = ArrayD::from_shape_fn(IxDyn(&[5, 1, 4, 4]), |_| rng.gen_range(-2.0..2.0));
            let fake = ArrayD::from_shape_fn(IxDyn(&[5, 1, 4, 4]), |_| rng.gen_range(-2.0..2.0));
            let p = dbkd_core::gan::gradient_penalty(&mut critic, &real, &fake, &mut rng).unwrap();
            if expected == 0.0 {
                assert!(p.abs() <= 1e-5, "norm 1 must give zero penalty, got {p}");
            } else {
                assert!(
                    (p - expected).abs() / expected <= 1e-5,
                    "penalty {p} vs {expected} for |w| = {norm}"
                );
            }
        }
    }

    // finite-difference agreement of one full discriminator update
    // (wasserstein + 10 * penalty) on a tiny f64 net with batch norm
    let conv = Conv2d::<f64>::new(1, 2, 3, 2, 1, &mut rng);
    let mut bn = dbkd_core::nn::BatchNorm2d::<f64>::new(2);
    bn.gamma = ArrayD::from_shape_fn(IxDyn(&[2]), |_| 1.0 + 0.2 * rng.gen_range(-1.0..1.0));
    bn.beta = ArrayD::from_shape_fn(IxDyn(&[2]), |_| 0.1 * rng.gen_range(-1.0..1.0));
    let lin = Linear::<f64>::new(2 * 4 * 4, 1, &mut rng);
    let params: Vec<ArrayD<f64>> = vec![
        conv.w.clone(),
        conv.b.clone(),
        bn.gamma.clone(),
        bn.beta.clone(),
        lin.w.clone(),
        lin.b.clone(),
    ];
    let real = ArrayD::from_shape_fn(IxDyn(&[4, 1, 8, 8]), |_| rng.gen_range(0.0..1.0));
    let fake = ArrayD::from_shape_fn(IxDyn(&[4, 1, 8, 8]), |_| rng.gen_range(0.0..1.0));
    let x_hat = interpolate(&real, &fake, &mut rng);

    fn build_loss(
        p: &[ArrayD<f64>],
        real: &ArrayD<f64>,
        fake: &ArrayD<f64>,
        x_hat: &ArrayD<f64>,
    ) -> (Tape<f64>, dbkd_core::nn::Id, Vec<dbkd_core::nn::Id>) {
        let mut critic = Sequential::new(vec![
            Layer::Conv(Conv2d::<f64> { w: p[0].clone(), b: p[1].clone(), stride: 2, pad: 1 }),
            Layer::Bn({
                let mut bn = dbkd_core::nn::BatchNorm2d::<f64>::new(2);
                bn.gamma = p[2].clone();
                bn.beta = p[3].clone();
                bn
            }),
            Layer::LeakyRelu(0.2),
            Layer::Flatten,
            Layer::Linear(Linear::<f64> { w: p[4].clone(), b: p[5].clone() }),
        ]);
        let mut t = Tape::<f64>::new();
        let mut bind = ParamBind::new();
        let f = t.constant(fake.clone());
        let r = t.constant(real.clone());
        let fs = critic.forward_train(&mut t, f, &mut bind);
        let rs = critic.forward_train(&mut t, r, &mut bind);
        let fmean = t.mean_all(fs);
        let rmean = t.mean_all(rs);
        let wass = t.sub(fmean, rmean);
        let xid = t.var(x_hat.clone());
        let pen = gp_on_tape(&mut t, &mut critic, &mut bind, xid);
        let scaled = t.scale(pen, 10.0);
        let total = t.add(wass, scaled);
        (t, total, bind.ids)
    }

    let analytic: Vec<ArrayD<f64>> = {
        let (mut t, total, ids) = build_loss(&params, &real, &fake, &x_hat);
        let gs = t.grad(total, &ids);
        gs.iter()
            .enumerate()
            .map(|(i, g)| match g {
                Some(id) => t.value(*id).clone(),
                None => ArrayD::zeros(params[i].raw_dim()),
            })
            .collect()
    };

    let f = |p: &[ArrayD<f64>]| -> f64 {
        let (t, total, _) = build_loss(p, &real, &fake, &x_hat);
        t.scalar(total)
    };
    let h = 1e-5;
    let mut num = 0.0;
    let mut den = 0.0;
    for pi in 0..params.len() {
        for idx in 0..params[pi].len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[pi].as_slice_mut().unwrap()[idx] += h;
            minus[pi].as_slice_mut().unwrap()[idx] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let an = analytic[pi].as_slice().unwrap()[idx];
            num += (fd - an) * (fd - an);
            den += fd * fd;
        }
    }
    let rel = (num / den.max(1e-30)).sqrt();
    assert!(rel < 1e-3, "discriminator update FD relative error {rel}");

    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(60), "criterion 4 runtime {dt:?} over 60s budget");
    println!("criterion 4: PASS — analytic penalties, update FD rel err {rel:.2e}, {dt:?}");
}

// ---------------------------------------------------------------------
// Criterion 6: coverage oracle
// ---------------------------------------------------------------------

#[test]
fn c06_coverage_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(106);
    let mut checked = 0;
    for trial in 0..100 {
        let n = rng.gen_range(8..=200);
        let m = rng.gen_range(1..=200);
        let d = rng.gen_range(1..8);
        let reference = ndarray::Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let candidates = ndarray::Array2::from_shape_fn((m, d), |_| rng.gen_range(-1.0..1.0));
        for k in [1usize, 3, 5] {
            if k >= n {
                continue;
            }
            let cfg = CoverageConfig { k_neighbors: k, max_reference: 1000, subsample_seed: 0 };
            let got = coverage_rows(&reference, &candidates, &cfg).unwrap();
            // O(n^2) double loop oracle
            let mut covered = 0usize;
            for i in 0..n {
                let mut dists: Vec<f64> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| {
                        reference
                            .row(i)
                            .iter()
                            .zip(reference.row(j).iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum()
                    })
                    .collect();
                dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let radius = dists[k - 1];
                if (0..m).any(|j| {
                    reference
                        .row(i)
                        .iter()
                        .zip(candidates.row(j).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        <= radius
                }) {
                    covered += 1;
                }
            }
            let want = covered as f64 / n as f64;
            assert_eq!(got, want, "trial {trial} k {k}: coverage {got} vs oracle {want}");
            checked += 1;
        }
    }

    // invariances on a fixed instance
    let reference = ndarray::Array2::from_shape_fn((40, 3), |_| rng.gen_range(-1.0..1.0));
    let candidates = ndarray::Array2::from_shape_fn((25, 3), |_| rng.gen_range(-1.0..1.0));
    let cfg = CoverageConfig { k_neighbors: 3, max_reference: 100, subsample_seed: 0 };
    let base = coverage_rows(&reference, &candidates, &cfg).unwrap();
    let mut rp = reference.clone();
    let mut cp = candidates.clone();
    // reverse-order permutation of both sets
    for (i, row) in reference.axis_iter(Axis(0)).enumerate() {
        rp.row_mut(39 - i).assign(&row);
    }
    for (i, row) in candidates.axis_iter(Axis(0)).enumerate() {
        cp.row_mut(24 - i).assign(&row);
    }
    assert_eq!(coverage_rows(&rp, &cp, &cfg).unwrap(), base, "permutation invariance");
    let rt = reference.mapv(|v| v - 7.5);
    let ct = candidates.mapv(|v| v - 7.5);
    assert_eq!(coverage_rows(&rt, &ct, &cfg).unwrap(), base, "translation invariance");

    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(60), "criterion 6 runtime {dt:?} over 60s budget");
    println!("criterion 6: PASS — {checked} oracle instances exact, invariances hold, {dt:?}");
}

// ---------------------------------------------------------------------
// Criterion 7 + 8: desk-scale end-to-end and diversity direction
// ---------------------------------------------------------------------

#[test]
fn c07_desk_scale_ordering() {
    let fix = desk();
    assert!(
        fix.teacher_epochs <= 10 && fix.teacher_accuracy >= 0.98,
        "teacher gate: {:.4} in {} epochs",
        fix.teacher_accuracy,
        fix.teacher_epochs
    );
    let mean = |name: &str| -> f64 {
        fix.metrics
            .iter()
            .map(|m| {
                m.students
                    .iter()
                    .find(|s| s.variant == name)
                    .map(|s| s.final_accuracy)
                    .expect("variant present")
            })
            .sum::<f64>()
            / fix.metrics.len() as f64
    };
    let alone = mean("alone");
    let standard = mean("standard_kd");
    let divbfkd = mean("divbfkd");
    let full = mean("full");
    println!(
        "criterion 7: teacher {:.4} in {} epochs; 3-seed means: alone {:.4}, standard_kd {:.4}, divbfkd {:.4}, full {:.4}; wall {:?}",
        fix.teacher_accuracy, fix.teacher_epochs, alone, standard, divbfkd, full, fix.wall
    );
    assert!(alone < standard, "Student-Alone ({alone:.4}) must trail Standard-KD ({standard:.4})");
    assert!(
        divbfkd - standard >= 0.015,
        "DivBFKD ({divbfkd:.4}) must beat Standard-KD ({standard:.4}) by >= 1.5 points"
    );
    assert!(
        fix.wall <= Duration::from_secs(90 * 60),
        "desk budget exceeded: {:?}",
        fix.wall
    );
    println!(
        "criterion 7: PASS — gap {:.2} points (>= 1.5), ordering holds",
        (divbfkd - standard) * 100.0
    );
}

#[test]
fn c08_diversity_direction() {
    let fix = desk();
    let mean_synth = fix.metrics.iter().map(|m| m.coverage.synthetic).sum::<f64>()
        / fix.metrics.len() as f64;
    let mean_fewshot =
        fix.metrics.iter().map(|m| m.coverage.fewshot).sum::<f64>() / fix.metrics.len() as f64;
    for (i, m) in fix.metrics.iter().enumerate() {
        println!(
            "criterion 8: seed {} coverage synthetic {:.4} vs few-shot {:.4}",
            i + 1,
            m.coverage.synthetic,
            m.coverage.fewshot
        );
    }
    assert!(
        mean_synth > mean_fewshot,
        "synthetic coverage {mean_synth:.4} must exceed few-shot coverage {mean_fewshot:.4}"
    );
    println!(
        "criterion 8: PASS — coverage(synthetics) {mean_synth:.4} > coverage(few-shot) {mean_fewshot:.4}"
    );
}

// ---------------------------------------------------------------------
// Criterion 5: class balancing on the trained desk generator
// ---------------------------------------------------------------------

struct ConstantSource {
    shape: ImageShape,
}

impl SyntheticSource for ConstantSource {
    fn sample(&self, count: usize, _rng: &mut dyn rand::RngCore) -> Array4<f32> {
        Array4::from_elem((count, self.shape.c, self.shape.h, self.shape.w), 0.4)
    }

    fn fingerprint(&self) -> String {
        "constant".into()
    }
}

#[test]
fn c05_class_balancing_on_desk_generator() {
    let fix = desk();
    let t0 = Instant::now();
    let run = &fix.run_dirs[0];
    let cfg: ExperimentConfig = serde_json::from_str(
        &std::fs::read_to_string(run.join("config.resolved.json")).unwrap(),
    )
    .unwrap();
    let generator =
        GeneratorNet::load(run.join("gan/generator.dbkw"), &cfg.gan_model).expect("generator");
    let sidecar: ClassifierSidecar =
        serde_json::from_str(&std::fs::read_to_string(run.join("teacher/meta.json")).unwrap())
            .unwrap();
    let teacher = InProcessTeacher::new(
        Classifier::load(
            run.join("teacher/weights.dbkw"),
            sidecar.arch,
            sidecar.num_classes,
            sidecar.input_shape,
        )
        .unwrap(),
    );

    let mut rng = ChaCha12Rng::seed_from_u64(105);
    let set = generate_balanced(&generator, &teacher, 100, &mut rng, 20_000)
        .expect("balanced generation on the desk generator");
    let mut counts = [0usize; 10];
    for &l in &set.pseudo_labels {
        counts[l] += 1;
    }
    assert_eq!(counts, [10usize; 10], "exact per-class quota");

    // second teacher pass re-verifies every pseudo-label
    let probs = teacher.predict_proba(&set.images).unwrap();
    for (p, &l) in probs.iter().zip(&set.pseudo_labels) {
        assert_eq!(pseudo_label(p), l, "second-pass pseudo-label disagreement");
    }

    // starvation on a constant-output generator
    match generate_balanced(
        &ConstantSource { shape: sidecar.input_shape },
        &teacher,
        100,
        &mut rng,
        20_000,
    ) {
        Err(DistillError::ClassStarvation(k)) => {
            println!("criterion 5: constant generator starves class {k} as required")
        }
        other => panic!("expected ClassStarvation, got {other:?}"),
    }

    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(120), "criterion 5 runtime {dt:?} over 2 min budget");
    println!(
        "criterion 5: PASS — 10 per class from {} attempts, re-verified, starvation path, {dt:?}",
        set.attempts_total
    );
}

// ---------------------------------------------------------------------
// Criterion 9: black-box boundary across the wire
// ---------------------------------------------------------------------

#[test]
fn c09_remote_black_box_boundary() {
    let fix = desk();
    let t0 = Instant::now();
    let run = &fix.run_dirs[0];
    let sidecar: ClassifierSidecar =
        serde_json::from_str(&std::fs::read_to_string(run.join("teacher/meta.json")).unwrap())
            .unwrap();
    let teacher = Arc::new(InProcessTeacher::new(
        Classifier::load(
            run.join("teacher/weights.dbkw"),
            sidecar.arch,
            sidecar.num_classes,
            sidecar.input_shape,
        )
        .unwrap(),
    ));
    let handle = serve(Arc::clone(&teacher), "127.0.0.1:0", 250).expect("serve");
    let remote = RemoteTeacher::connect(&handle.endpoint(), 250, 3, Duration::from_millis(50))
        .expect("remote teacher");

    // 100 random batches agree within 1e-5
    let mut rng = ChaCha12Rng::seed_from_u64(109);
    let mut max_diff: f64 = 0.0;
    for _ in 0..100 {
        let b = rng.gen_range(1..6);
        let batch = Array4::from_shape_fn((b, 1, 32, 32), |_| rng.gen_range(0.0..1.0f32));
        let local = teacher.predict_proba(&batch).unwrap();
        let rem = remote.predict_proba(&batch).unwrap();
        for (l, r) in local.iter().zip(&rem) {
            for (lv, rv) in l.values().iter().zip(r.values()) {
                max_diff = max_diff.max((lv - rv).abs());
            }
        }
    }
    assert!(max_diff <= 1e-5, "remote drift {max_diff}");

    // interface audit: trait surface and route table
    let src = include_str!("../../core/src/teacher.rs");
    let trait_body = src
        .split("pub trait BlackBoxTeacher")
        .nth(1)
        .and_then(|s| s.split('}').next())
        .expect("trait definition");
    let methods: Vec<&str> = trait_body
        .lines()
        .filter_map(|l| l.trim().strip_prefix("fn ").map(|r| r.split('(').next().unwrap()))
        .collect();
    assert_eq!(methods, vec!["num_classes", "input_shape", "predict_proba"]);
    assert_eq!(
        dbkd_core::service::ROUTES,
        &[("GET", "/v1/meta"), ("POST", "/v1/predict")]
    );

    // the pipeline completes in remote mode (micro preset)
    let mut cfg = micro_config();
    cfg.master_seed = 6;
    cfg.teacher_url = Some(handle.endpoint());
    let out = acceptance_root("micro-remote");
    let outcome = run_pipeline(&cfg, &out, true, None).expect("remote-mode pipeline");
    let doc = read_metrics(&outcome.run_dir);
    assert!(doc.students.len() == 4, "remote pipeline produced all students");

    let dt = t0.elapsed();
    println!(
        "criterion 9: PASS — max remote drift {max_diff:.2e}, audit clean, remote pipeline done, {dt:?}"
    );
    handle.shutdown();
}

// ---------------------------------------------------------------------
// Criterion 10: determinism and resume
// ---------------------------------------------------------------------

fn strip_timing(manifest: &RunManifest) -> serde_json::Value {
    let mut v = serde_json::to_value(manifest).unwrap();
    if let Some(stages) = v.get_mut("stages").and_then(|s| s.as_object_mut()) {
        for (_, entry) in stages.iter_mut() {
            if let Some(e) = entry.as_object_mut() {
                e.remove("started_unix_ms");
                e.remove("finished_unix_ms");
            }
        }
    }
    v
}

#[test]
fn c10_determinism_and_resume() {
    let fix = micro();
    let a = std::fs::read(fix.run_a.join("metrics.json")).unwrap();
    let b = std::fs::read(fix.run_b.join("metrics.json")).unwrap();
    assert_eq!(a, b, "two runs with the same master seed must produce identical metrics.json");

    let c = std::fs::read(fix.resumed.join("metrics.json")).unwrap();
    assert_eq!(a, c, "resumed run must produce identical metrics.json");

    let ma = RunManifest::load(&fix.run_a).unwrap();
    let mc = RunManifest::load(&fix.resumed).unwrap();
    assert_eq!(
        strip_timing(&ma),
        strip_timing(&mc),
        "resumed manifest must match the uninterrupted one (modulo timing)"
    );
    println!("criterion 10: PASS — identical metrics across fresh runs and across interrupt+resume");
}
