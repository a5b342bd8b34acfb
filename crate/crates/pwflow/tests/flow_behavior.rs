//! End-to-end behavior of the autoregressive flow: invertibility, Jacobian
//! bookkeeping, ordering coverage, and that training actually tightens the
//! fit instead of merely terminating.

use pwflow::numerics::Matrix;
use pwflow::made::{identity_ordering, reversed_ordering};
use pwflow::{train, MafModel, Standardizer, TrainingConfig, WeightedSampleSet};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

const LN_TWO_PI: f64 = 1.837_877_066_409_345_3;

fn randomize(model: &mut MafModel, spread: f64, seed: u64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for m in model.params_mut() {
        for v in m.data_mut().iter_mut() {
            *v += rng.random_range(-spread..spread);
        }
    }
}

fn random_points(n: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(n, dim);
    for v in m.data_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    m
}

fn gaussian_samples(n: usize, mean: &[f64], std: &[f64], seed: u64) -> WeightedSampleSet {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let dim = mean.len();
    let mut m = Matrix::zeros(n, dim);
    for r in 0..n {
        for c in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            m.set(r, c, mean[c] + std[c] * z);
        }
    }
    WeightedSampleSet::unit_weights(m)
}

#[test]
fn block_orderings_alternate_so_every_coordinate_leads_somewhere() {
    let model = MafModel::new(3, &[8], 4, 0).unwrap();
    let blocks = model.blocks();
    assert_eq!(blocks[0].ordering(), identity_ordering(3).as_slice());
    assert_eq!(blocks[1].ordering(), reversed_ordering(3).as_slice());
    assert_eq!(blocks[2].ordering(), identity_ordering(3).as_slice());
    assert_eq!(blocks[3].ordering(), reversed_ordering(3).as_slice());
    // With alternation, each coordinate sits at the unconditioned first
    // position in some block, so no marginal is forced to stay Gaussian.
    let led: Vec<usize> = blocks.iter().map(|b| b.ordering()[0]).collect();
    assert!(led.contains(&0) && led.contains(&2));
}

#[test]
fn fresh_flow_is_exactly_the_standard_normal() {
    for dim in [1usize, 2, 5] {
        let model = MafModel::new(dim, &[8, 8], 2, 3).unwrap();
        let probes = random_points(20, dim, 40 + dim as u64);
        let logp = model.log_prob_batch(&probes).unwrap();
        for (r, lp) in logp.iter().enumerate() {
            let sq: f64 = probes.row(r).iter().map(|v| v * v).sum();
            let expect = -0.5 * (dim as f64) * LN_TWO_PI - 0.5 * sq;
            assert!((lp - expect).abs() < 1e-12, "dim {dim} row {r}: {lp} vs {expect}");
        }
    }
}

#[test]
fn forward_then_inverse_recovers_inputs() {
    for (dim, seed) in [(2usize, 7u64), (5, 8)] {
        let mut model = MafModel::new(dim, &[16, 16], 2, seed).unwrap();
        randomize(&mut model, 0.3, seed + 50);
        let x = random_points(64, dim, seed + 100);
        let pass = model.forward_batch(&x).unwrap();
        let back = model.inverse_batch(&pass.z).unwrap();
        for i in 0..x.len() {
            assert!(
                (x.data()[i] - back.data()[i]).abs() < 1e-8,
                "dim {dim} entry {i}: {} vs {}",
                x.data()[i],
                back.data()[i]
            );
        }
    }
}

#[test]
fn inverse_then_forward_recovers_latents() {
    let mut model = MafModel::new(3, &[12], 3, 9).unwrap();
    randomize(&mut model, 0.25, 59);
    let z = random_points(64, 3, 109);
    let x = model.inverse_batch(&z).unwrap();
    let pass = model.forward_batch(&x).unwrap();
    for i in 0..z.len() {
        assert!((z.data()[i] - pass.z.data()[i]).abs() < 1e-8);
    }
}

#[test]
fn round_trip_survives_a_fitted_standardizer() {
    let mut model = MafModel::new(2, &[10], 2, 10).unwrap();
    randomize(&mut model, 0.2, 60);
    let samples = gaussian_samples(400, &[3.0, -2.0], &[0.5, 4.0], 110);
    model.set_standardizer(Standardizer::fit(&samples).unwrap()).unwrap();
    let x = random_points(32, 2, 111);
    let pass = model.forward_batch(&x).unwrap();
    let back = model.inverse_batch(&pass.z).unwrap();
    for i in 0..x.len() {
        assert!((x.data()[i] - back.data()[i]).abs() < 1e-8);
    }
}

#[test]
fn log_det_matches_a_numerical_jacobian_in_two_dimensions() {
    let mut model = MafModel::new(2, &[14, 14], 2, 12).unwrap();
    randomize(&mut model, 0.3, 62);
    let step = 1e-5;
    let probes = random_points(10, 2, 112);
    for r in 0..probes.rows() {
        let x = probes.row(r);
        let (_, log_det) = model.forward(x).unwrap();
        let mut jac = [[0.0f64; 2]; 2];
        for j in 0..2 {
            let mut plus = x.to_vec();
            plus[j] += step;
            let mut minus = x.to_vec();
            minus[j] -= step;
            let (zp, _) = model.forward(&plus).unwrap();
            let (zm, _) = model.forward(&minus).unwrap();
            for i in 0..2 {
                jac[i][j] = (zp[i] - zm[i]) / (2.0 * step);
            }
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        assert!(
            (det.abs().ln() - log_det).abs() < 1e-4,
            "row {r}: ln|J| {} vs accumulated {log_det}",
            det.abs().ln()
        );
    }
}

#[test]
fn density_integrates_changes_of_variable_correctly() {
    // A fresh flow with a hand-set standardizer is exactly a diagonal
    // Gaussian, so its log-density has a closed form to compare against.
    let mut model = MafModel::new(2, &[8], 2, 13).unwrap();
    let shift = vec![1.0, -2.0];
    let scale = vec![0.5, 3.0];
    model.set_standardizer(Standardizer::new(shift.clone(), scale.clone()).unwrap()).unwrap();
    let probes = random_points(20, 2, 113);
    for r in 0..probes.rows() {
        let x = probes.row(r);
        let mut expect = -(2.0 / 2.0) * LN_TWO_PI;
        for c in 0..2 {
            let z = (x[c] - shift[c]) / scale[c];
            expect += -0.5 * z * z - scale[c].ln();
        }
        let got = model.log_prob(x).unwrap();
        assert!((got - expect).abs() < 1e-12, "row {r}: {got} vs {expect}");
    }
}

#[test]
fn sampling_respects_the_standardizer_moments() {
    let mut model = MafModel::new(2, &[8], 2, 14).unwrap();
    model.set_standardizer(Standardizer::new(vec![2.0, -1.0], vec![0.5, 2.0]).unwrap()).unwrap();
    let draws = model.sample(40_000, 77).unwrap();
    let n = draws.len() as f64;
    for (c, (&m, &s)) in [2.0, -1.0].iter().zip(&[0.5, 2.0]).enumerate() {
        let col = draws.points().column(c);
        let mean: f64 = col.iter().sum::<f64>() / n;
        let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        assert!((mean - m).abs() < 5.0 * s / n.sqrt(), "column {c} mean {mean}");
        assert!((var.sqrt() - s).abs() < 0.05 * s, "column {c} std {}", var.sqrt());
    }
}

#[test]
fn training_tightens_the_fit_and_rolls_back_to_the_best_epoch() {
    let samples = gaussian_samples(600, &[1.5, -0.5], &[1.2, 0.6], 314);
    let mut model = MafModel::new(2, &[12, 12], 2, 15).unwrap();
    let config = TrainingConfig {
        max_epochs: 150,
        patience_fraction: 0.2,
        batch_size: Some(128),
        seed: 5,
        ..TrainingConfig::default()
    };
    let before = model.loss(&samples).unwrap();
    let report = train(&mut model, &samples, &config).unwrap();
    let after = model.loss(&samples).unwrap();

    assert!(after < before, "loss went {before} -> {after}");
    assert!(report.best_epoch <= report.epochs_run);
    assert_eq!(report.samples_used, 600);
    assert_eq!(report.parameter_count, model.parameter_count());

    // The restored parameters must reproduce the reported best test loss.
    let (_, test_set) = pwflow::training::split(
        &samples,
        config.test_fraction,
        pwflow::derive_seed(config.seed, pwflow::training::SEED_SPLIT),
    )
    .unwrap();
    let test_loss = model.loss(&test_set).unwrap();
    assert!(
        (test_loss - report.best_test_loss).abs() < 1e-12,
        "restored test loss {test_loss} vs reported {}",
        report.best_test_loss
    );
}

#[test]
fn training_on_a_standard_normal_approaches_its_entropy() {
    // The differential entropy of a two-dimensional standard normal is
    // 1 + ln(2*pi) = 2.8379; a flow that starts there should stay there,
    // with test loss moving only by sampling noise.
    let samples = gaussian_samples(4000, &[0.0, 0.0], &[1.0, 1.0], 2024);
    let mut model = MafModel::new(2, &[16, 16], 2, 16).unwrap();
    let config = TrainingConfig {
        max_epochs: 120,
        patience_fraction: 0.25,
        batch_size: Some(512),
        seed: 6,
        ..TrainingConfig::default()
    };
    let report = train(&mut model, &samples, &config).unwrap();
    let entropy = 1.0 + (2.0 * std::f64::consts::PI).ln();
    assert!(
        (report.best_test_loss - entropy).abs() < 0.1,
        "best test loss {} vs entropy {entropy}",
        report.best_test_loss
    );
}

#[test]
fn same_seed_training_is_bit_reproducible() {
    let samples = gaussian_samples(300, &[0.5, 0.5], &[1.0, 0.8], 99);
    let config = TrainingConfig {
        max_epochs: 30,
        patience_fraction: 0.5,
        batch_size: Some(64),
        seed: 7,
        ..TrainingConfig::default()
    };
    let mut run = |seed: u64| {
        let mut model = MafModel::new(2, &[10], 2, seed).unwrap();
        let report = train(&mut model, &samples, &config).unwrap();
        (model.to_bytes(), report.best_test_loss)
    };
    let (bytes_a, loss_a) = run(21);
    let (bytes_b, loss_b) = run(21);
    assert_eq!(bytes_a, bytes_b);
    assert_eq!(loss_a, loss_b);
    let (bytes_c, _) = run(22);
    assert_ne!(bytes_a, bytes_c, "different init seeds should land elsewhere");
}

#[test]
fn saved_models_reload_with_identical_densities() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.maf");
    let mut model = MafModel::new(2, &[9, 9], 3, 17).unwrap();
    randomize(&mut model, 0.2, 67);
    model
        .set_standardizer(Standardizer::new(vec![0.3, -0.8], vec![1.5, 0.7]).unwrap())
        .unwrap();
    model.save(&path).unwrap();
    let reloaded = MafModel::load(&path).unwrap();

    let probes = random_points(25, 2, 117);
    let before = model.log_prob_batch(&probes).unwrap();
    let after = reloaded.log_prob_batch(&probes).unwrap();
    assert_eq!(before, after, "reload must be bit-exact");
    assert_eq!(model.to_bytes(), reloaded.to_bytes());
}
