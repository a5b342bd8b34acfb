//! Acceptance gate: one test per release criterion. Every test prints a
//! `criterion NN [PASS/FAIL]` line with the measured numbers (visible with
//! `--nocapture`, and automatically for any failing test), then asserts.
//!
//! Criteria 4, 6 and 7 share one full-protocol benchmark (three targets,
//! ten runs each, the documented training budget), built once on first use
//! and reused by the later tests.

use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use pwflow::numerics::{GradTape, Matrix};
use pwflow::{
    component_seed, derive_seed, kl_divergence, select_k, train, unit_mass, ClusterSelection,
    LogDensity, MafModel, PiecewiseConfig, PiecewiseFlow, Target, TrainingConfig,
    WeightedSampleSet,
};
use pwflow_cli::benchmark::{run_benchmark, BenchmarkConfig, BenchmarkOutcome, MethodSummary};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

fn verdict(n: usize, pass: bool, detail: &str) {
    println!("criterion {n:02} [{}] {detail}", if pass { "PASS" } else { "FAIL" });
}

fn randomize(model: &mut MafModel, spread: f64, seed: u64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for m in model.params_mut() {
        for v in m.data_mut().iter_mut() {
            *v += rng.random_range(-spread..spread);
        }
    }
}

fn random_points(n: usize, dim: usize, lo: f64, hi: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(n, dim);
    for v in m.data_mut() {
        *v = rng.random_range(lo..hi);
    }
    m
}

fn gaussian_blob(n: usize, dim: usize, seed: u64) -> WeightedSampleSet {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(n, dim);
    for r in 0..n {
        let mut prev = 0.0;
        for c in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            // Mild correlation between neighboring coordinates.
            let v = 0.5 * prev + (1.0 + 0.3 * c as f64) * z;
            m.set(r, c, v);
            prev = v;
        }
    }
    WeightedSampleSet::unit_weights(m)
}

// ---------------------------------------------------------------------------
// Shared full-protocol benchmark fixture (criteria 4, 6, 7).

struct Fixture {
    outcome: BenchmarkOutcome,
    _dir: tempfile::TempDir,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().expect("temp dir for benchmark output");
        let cfg = BenchmarkConfig::default();
        let outcome = run_benchmark(&cfg, dir.path()).expect("full benchmark");
        Fixture { outcome, _dir: dir }
    })
}

fn pnf_summary<'a>(outcome: &'a BenchmarkOutcome, target: &str) -> &'a MethodSummary {
    outcome
        .targets
        .iter()
        .find(|t| t.target == target)
        .and_then(|t| t.pnf.as_ref())
        .unwrap_or_else(|| panic!("{target}: piecewise runs failed"))
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_loss_gradients_match_finite_differences() {
    let started = Instant::now();
    let step = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let mut model = MafModel::new(2, &[8, 8], 2, seed).unwrap();
        randomize(&mut model, 0.2, 1000 + seed);
        let points = random_points(64, 2, -2.0, 2.0, 2000 + seed);
        let weights = vec![1.0; 64];

        let eval = |m: &MafModel| -> f64 {
            let mut tape = GradTape::new();
            let (loss, _) = m.loss_taped(&mut tape, &points, &weights).unwrap();
            tape.scalar(loss).unwrap()
        };

        let mut tape = GradTape::new();
        let (loss, ids) = model.loss_taped(&mut tape, &points, &weights).unwrap();
        let grads = tape.backward(loss).unwrap();

        for (p, id) in ids.iter().enumerate() {
            let grad = grads.get(*id).unwrap().clone();
            for idx in 0..grad.len() {
                let mut plus = model.clone();
                plus.params_mut()[p].data_mut()[idx] += step;
                let mut minus = model.clone();
                minus.params_mut()[p].data_mut()[idx] -= step;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let analytic = grad.data()[idx];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 10.0;
    verdict(1, pass, &format!("gradient max relative error {worst:.3e} over 5 seeds in {secs:.1}s"));
    assert!(pass, "max relative error {worst}, runtime {secs}s");
}

#[test]
fn criterion_02_round_trips_are_bijective() {
    let quick = TrainingConfig {
        max_epochs: 60,
        patience_fraction: 0.5,
        batch_size: Some(256),
        ..TrainingConfig::default()
    };

    let mut trained_2d = MafModel::new(2, &[16, 16], 2, 1).unwrap();
    let rings = Target::by_name("two-rings").unwrap();
    train(&mut trained_2d, &rings.sample(1500, 11).unwrap(), &quick).unwrap();

    let mut trained_5d = MafModel::new(5, &[16, 16], 2, 2).unwrap();
    train(&mut trained_5d, &gaussian_blob(1500, 5, 12), &quick).unwrap();

    let mut untrained_2d = MafModel::new(2, &[16, 16], 2, 3).unwrap();
    randomize(&mut untrained_2d, 0.3, 13);
    let mut untrained_5d = MafModel::new(5, &[16, 16], 2, 4).unwrap();
    randomize(&mut untrained_5d, 0.3, 14);

    let mut worst = 0.0f64;
    let mut trips = 0usize;
    for (i, model) in [&trained_2d, &trained_5d, &untrained_2d, &untrained_5d]
        .into_iter()
        .enumerate()
    {
        let points = model.sample(2500, 5000 + i as u64).unwrap();
        let pass_fwd = model.forward_batch(points.points()).unwrap();
        let back = model.inverse_batch(&pass_fwd.z).unwrap();
        for idx in 0..back.len() {
            worst = worst.max((back.data()[idx] - points.points().data()[idx]).abs());
        }
        trips += points.len();
    }
    let pass = worst < 1e-8 && trips >= 10_000;
    verdict(2, pass, &format!("max round-trip error {worst:.3e} over {trips} points"));
    assert!(pass, "max abs error {worst} over {trips} round trips");
}

/// Determinant by partial-pivot elimination; the test-side oracle for
/// criterion 3.
fn determinant(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    det
}

#[test]
fn criterion_03_log_det_matches_numerical_jacobians() {
    let step = 1e-5;
    let mut worst = 0.0f64;
    for (dim, seed) in [(2usize, 21u64), (5, 22)] {
        let mut model = MafModel::new(dim, &[12, 12], 2, seed).unwrap();
        randomize(&mut model, 0.3, seed + 100);
        let probes = random_points(100, dim, -2.0, 2.0, seed + 200);
        for r in 0..probes.rows() {
            let x = probes.row(r);
            let (_, log_det) = model.forward(x).unwrap();
            let mut jac = vec![vec![0.0; dim]; dim];
            for j in 0..dim {
                let mut plus = x.to_vec();
                plus[j] += step;
                let mut minus = x.to_vec();
                minus[j] -= step;
                let (zp, _) = model.forward(&plus).unwrap();
                let (zm, _) = model.forward(&minus).unwrap();
                for i in 0..dim {
                    jac[i][j] = (zp[i] - zm[i]) / (2.0 * step);
                }
            }
            let fd = determinant(jac).abs().ln();
            worst = worst.max((fd - log_det).abs());
        }
    }
    let pass = worst < 1e-4;
    verdict(3, pass, &format!("max |ln|det J| - log_det| = {worst:.3e} over 200 points, D in {{2,5}}"));
    assert!(pass, "max log-det discrepancy {worst}");
}

#[test]
fn criterion_04_densities_are_normalized() {
    let mut masses: Vec<(String, f64)> = Vec::new();
    for target in Target::all() {
        masses.push((target.name().to_string(), unit_mass(&target).unwrap()));
    }

    let fx = fixture();
    let circle = fx
        .outcome
        .targets
        .iter()
        .find(|t| t.target == "circle-of-gaussians")
        .expect("circle benchmark ran");
    let maf = circle.first_maf.as_ref().expect("single-flow runs succeeded");
    masses.push(("trained single flow".to_string(), unit_mass(maf).unwrap()));
    for t in &fx.outcome.targets {
        let flow = t.first_pnf.as_ref().unwrap_or_else(|| panic!("{}: pnf failed", t.target));
        masses.push((format!("trained mixture on {}", t.target), unit_mass(flow).unwrap()));
    }

    let pass = masses.iter().all(|(_, m)| (0.99..=1.01).contains(m));
    let detail: Vec<String> = masses.iter().map(|(n, m)| format!("{n}: {m:.4}")).collect();
    verdict(4, pass, &format!("quadrature masses {}", detail.join(", ")));
    assert!(pass, "masses out of [0.99, 1.01]: {detail:?}");
}

#[test]
fn criterion_05_silhouette_scan_finds_the_eight_modes() {
    let started = Instant::now();
    let circle = Target::by_name("circle-of-gaussians").unwrap();
    let mut hits = 0;
    let mut chosen = Vec::new();
    for seed in 0..10u64 {
        let samples = circle.sample(10_000, derive_seed(seed, 0x53_43414e)).unwrap();
        let scan = select_k(&samples, 2, 12, seed).unwrap();
        chosen.push(scan.chosen_k);
        if scan.chosen_k == 8 {
            hits += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = hits >= 9 && secs < 60.0;
    verdict(5, pass, &format!("chose k=8 on {hits}/10 seeds (picks {chosen:?}) in {secs:.1}s"));
    assert!(pass, "k=8 on {hits}/10 seeds in {secs}s");
}

#[test]
fn criterion_06_divergence_bands_hold_at_benchmark_scale() {
    let fx = fixture();
    let bands = [("circle-of-gaussians", 0.05), ("two-moons", 0.10), ("two-rings", 0.15)];
    let mut pass = true;
    let mut details = Vec::new();
    for (name, band) in bands {
        let s = pnf_summary(&fx.outcome, name);
        let ok = s.kl_mean <= band && s.kl_mean >= -3.0 * s.kl_error;
        pass &= ok;
        details.push(format!("{name}: {:.4} +- {:.4} (band {band})", s.kl_mean, s.kl_error));
    }
    verdict(6, pass, &details.join(", "));
    assert!(pass, "{details:?}");
}

#[test]
fn criterion_07_piecewise_training_is_cheaper_under_parity() {
    let fx = fixture();
    let mut pass = true;
    let mut details = Vec::new();
    for t in &fx.outcome.targets {
        let maf = t.maf.as_ref().expect("single-flow summary");
        let pnf = t.pnf.as_ref().expect("piecewise summary");
        let ratio = pnf.cost_raw / maf.cost_raw;
        let ok = ratio < 0.6 && pnf.parity_error <= 0.15;
        pass &= ok;
        details.push(format!(
            "{}: cost {ratio:.3}, parity {:.3}, k={}, epochs {}/{}, wall {:.0}s/{:.0}s",
            t.target, pnf.parity_error, pnf.chosen_k, pnf.epochs, maf.epochs,
            pnf.wall_seconds, maf.wall_seconds
        ));
    }
    verdict(7, pass, &details.join("; "));
    assert!(pass, "{details:?}");
}

#[test]
fn criterion_08_single_component_mixture_equals_a_bare_flow() {
    let circle = Target::by_name("circle-of-gaussians").unwrap();
    let samples = circle.sample(500, 41).unwrap();
    let cfg = PiecewiseConfig {
        training: TrainingConfig {
            max_epochs: 40,
            patience_fraction: 0.5,
            batch_size: Some(128),
            seed: 77,
            ..TrainingConfig::default()
        },
        clusters: ClusterSelection::Fixed(1),
        hidden: vec![8, 8],
        ..PiecewiseConfig::default()
    };
    let (flow, _) = PiecewiseFlow::fit(&samples, &cfg).unwrap();

    let mut bare = MafModel::new(2, &[8, 8], cfg.blocks, component_seed(77, 0)).unwrap();
    let tcfg = TrainingConfig { seed: component_seed(77, 0), ..cfg.training.clone() };
    train(&mut bare, &samples, &tcfg).unwrap();

    let probes = circle.sample(1000, 42).unwrap();
    let mixture = flow.log_prob_batch(probes.points()).unwrap();
    let single = bare.log_prob_batch(probes.points()).unwrap();
    let worst = mixture
        .iter()
        .zip(&single)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let pass = worst <= 1e-12;
    verdict(8, pass, &format!("max |log p difference| = {worst:.3e} at 1000 probes"));
    assert!(pass, "max difference {worst}");
}

/// Centered 1-D Gaussian used as the analytic side of criterion 9.
struct GaussianDensity {
    sigma: f64,
}

impl LogDensity for GaussianDensity {
    fn dim(&self) -> usize {
        1
    }

    fn log_density(&self, x: &[f64]) -> pwflow::Result<f64> {
        let z = x[0] / self.sigma;
        Ok(-0.5 * z * z - self.sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
    }
}

#[test]
fn criterion_09_divergence_estimator_is_calibrated() {
    // A fresh flow is exactly the standard normal, so against N(0, 2) the
    // estimator must recover ln 2 + 1/8 - 1/2.
    let model = MafModel::new(1, &[8], 2, 51).unwrap();
    let target = GaussianDensity { sigma: 2.0 };
    let analytic = (2.0f64).ln() + 0.125 - 0.5;
    let kl = kl_divergence(&model, &target, 10_000, 52).unwrap();
    let calibrated = (kl.value - analytic).abs() < 3.0 * kl.mc_error;

    // Model against itself: every summand is exactly zero, so both the
    // value and its error vanish; the bound holds as an equality.
    let self_kl = kl_divergence(&model, &model, 10_000, 53).unwrap();
    let self_ok = self_kl.value.abs() <= 3.0 * self_kl.mc_error;

    let pass = calibrated && self_ok;
    verdict(
        9,
        pass,
        &format!(
            "kl {:.4} vs analytic {analytic:.4} (mc error {:.4}); self-kl {:e}",
            kl.value, kl.mc_error, self_kl.value
        ),
    );
    assert!(pass, "kl {} vs {analytic}, self {}", kl.value, self_kl.value);
}

fn run_tiny_benchmark(out: &std::path::Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_pwflow"))
        .args([
            "benchmark",
            "--target",
            "two-rings",
            "--runs",
            "2",
            "--train-samples",
            "800",
            "--kl-samples",
            "400",
            "--dump-samples",
            "500",
            "--clusters",
            "2",
            "--hidden",
            "10,10",
            "--max-epochs",
            "60",
            "--patience-frac",
            "0.5",
            "--batch-size",
            "256",
            "--out",
        ])
        .arg(out)
        .status()
        .expect("benchmark invocation");
    assert!(status.success(), "tiny benchmark failed");
}

#[test]
fn criterion_10_benchmark_metric_files_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_tiny_benchmark(&a);
    run_tiny_benchmark(&b);

    let mut compared = 0;
    let mut mismatches = Vec::new();
    for path in pwflow_cli::benchmark::metric_files(&a).unwrap() {
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        let left = std::fs::read(&path).unwrap();
        let right = std::fs::read(b.join(&name)).unwrap_or_default();
        if left != right {
            mismatches.push(name);
        }
        compared += 1;
    }
    let pass = mismatches.is_empty() && compared >= 5;
    verdict(
        10,
        pass,
        &format!("{compared} metric files byte-identical across invocations"),
    );
    assert!(pass, "{compared} compared, mismatches: {mismatches:?}");
}

#[test]
fn criterion_11_thread_count_never_changes_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("input.txt");
    Target::by_name("circle-of-gaussians")
        .unwrap()
        .sample(600, 61)
        .unwrap()
        .save_text(&input, false)
        .unwrap();

    let fit = |threads: &str, out: &std::path::Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_pwflow"))
            .env("PWFLOW_THREADS", threads)
            .args(["train", "--clusters", "4", "--hidden", "12,12", "--max-epochs", "50"])
            .args(["--patience-frac", "0.5", "--batch-size", "128", "--seed", "62"])
            .arg("--input")
            .arg(&input)
            .arg("--out")
            .arg(out)
            .status()
            .expect("train invocation");
        assert!(status.success(), "train with PWFLOW_THREADS={threads} failed");
    };
    let serial = dir.path().join("serial.pnf");
    let parallel = dir.path().join("parallel.pnf");
    fit("1", &serial);
    fit("4", &parallel);

    let same = std::fs::read(&serial).unwrap() == std::fs::read(&parallel).unwrap();
    verdict(11, same, "model files identical under PWFLOW_THREADS=1 and =4");
    assert!(same, "model files differ between thread counts");
}
