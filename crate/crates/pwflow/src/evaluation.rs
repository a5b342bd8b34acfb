//! Density-quality metrics: a Monte Carlo KL-divergence estimator with error
//! bars, weighted average log-likelihood, multi-run aggregation, and the grid
//! quadrature the normalization tests are built on.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::maf::MafModel;
use crate::numerics::Matrix;
use crate::piecewise::PiecewiseFlow;
use crate::samples::WeightedSampleSet;
use crate::targets::Target;

/// Floor for log-densities, just above where exp() underflows to zero in
/// 64-bit floats. Target log-densities below this are clipped (and counted)
/// so a KL summand never becomes infinite.
pub const LOG_DENSITY_CLIP: f64 = -745.0;

/// Fraction of clipped summands above which a KL estimate is rejected as
/// meaningless rather than reported.
pub const MAX_CLIP_FRACTION: f64 = 1e-3;

/// Anything with a pointwise normalized log-density.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, x: &[f64]) -> Result<f64>;

    /// One value per row. Implementations with a faster batched path
    /// (the flows) override this.
    fn log_density_batch(&self, xs: &Matrix) -> Result<Vec<f64>> {
        (0..xs.rows()).map(|i| self.log_density(xs.row(i))).collect()
    }
}

/// Anything that can draw a seeded, reproducible sample set.
pub trait Sampleable {
    fn sample(&self, n: usize, seed: u64) -> Result<WeightedSampleSet>;
}

/// What the KL estimator needs from the model side: score and generate.
pub trait GenerativeDensity: LogDensity + Sampleable {}

impl<T: LogDensity + Sampleable> GenerativeDensity for T {}

impl LogDensity for MafModel {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.log_prob(x)
    }

    fn log_density_batch(&self, xs: &Matrix) -> Result<Vec<f64>> {
        self.log_prob_batch(xs)
    }
}

impl Sampleable for MafModel {
    fn sample(&self, n: usize, seed: u64) -> Result<WeightedSampleSet> {
        MafModel::sample(self, n, seed)
    }
}

impl LogDensity for PiecewiseFlow {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.log_prob(x)
    }

    fn log_density_batch(&self, xs: &Matrix) -> Result<Vec<f64>> {
        self.log_prob_batch(xs)
    }
}

impl Sampleable for PiecewiseFlow {
    fn sample(&self, n: usize, seed: u64) -> Result<WeightedSampleSet> {
        PiecewiseFlow::sample(self, n, seed)
    }
}

impl LogDensity for Target {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        Target::log_density(self, x)
    }
}

impl Sampleable for Target {
    fn sample(&self, n: usize, seed: u64) -> Result<WeightedSampleSet> {
        Target::sample(self, n, seed)
    }
}

/// One Monte Carlo KL estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlEstimate {
    /// Mean of log(p_model / p_target) under the model's own samples, nats.
    pub value: f64,
    /// Standard error of that mean.
    pub mc_error: f64,
    pub n_samples: usize,
    /// How many summands had their target log-density clipped at
    /// [`LOG_DENSITY_CLIP`].
    pub clipped: usize,
}

/// KL(model ‖ target) estimated from `n` model samples: the mean of
/// log p_model(x) − log p_target(x) with x drawn from the model, plus the
/// standard error of that mean. Estimates can come out slightly negative by
/// Monte Carlo noise; consumers should treat −3·mc_error as the floor.
pub fn kl_divergence(
    model: &dyn GenerativeDensity,
    target: &dyn LogDensity,
    n: usize,
    seed: u64,
) -> Result<KlEstimate> {
    if n < 100 {
        return Err(Error::config(format!(
            "a KL estimate needs at least 100 samples, got {n}"
        )));
    }
    if model.dim() != target.dim() {
        return Err(Error::config(format!(
            "model dimension {} does not match target dimension {}",
            model.dim(),
            target.dim()
        )));
    }
    let xs = model.sample(n, seed)?;
    let lp_model = model.log_density_batch(xs.points())?;
    let lp_target = target.log_density_batch(xs.points())?;

    let mut clipped = 0usize;
    let mut summands = Vec::with_capacity(n);
    for (j, (&lm, &lt)) in lp_model.iter().zip(&lp_target).enumerate() {
        if !lm.is_finite() {
            return Err(Error::numeric(
                format!("model log-density at its own sample {j}"),
                lm,
            ));
        }
        if lt.is_nan() || lt == f64::INFINITY {
            return Err(Error::numeric(format!("target log-density at sample {j}"), lt));
        }
        let lt = if lt < LOG_DENSITY_CLIP {
            clipped += 1;
            LOG_DENSITY_CLIP
        } else {
            lt
        };
        summands.push(lm - lt);
    }
    if (clipped as f64) > MAX_CLIP_FRACTION * n as f64 {
        return Err(Error::Evaluation(format!(
            "{clipped} of {n} model samples fell where the target density underflows; \
             the KL estimate would be dominated by clipping"
        )));
    }

    let mean = summands.iter().sum::<f64>() / n as f64;
    let var = summands.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let mc_error = (var / n as f64).sqrt();
    if !mean.is_finite() || !mc_error.is_finite() {
        return Err(Error::numeric("KL estimate", mean));
    }
    Ok(KlEstimate { value: mean, mc_error, n_samples: n, clipped })
}

/// Weighted mean log-density of `model` over a held-out set, with a
/// two-sigma error scaled by the effective sample size (Σw)²/Σw². A single
/// test point has no spread estimate; the error is reported as infinity.
pub fn avg_log_likelihood(
    model: &dyn LogDensity,
    test: &WeightedSampleSet,
) -> Result<(f64, f64)> {
    if test.is_empty() {
        return Err(Error::config("average log-likelihood of an empty test set"));
    }
    if test.dim() != model.dim() {
        return Err(Error::config(format!(
            "model dimension {} does not match test-set dimension {}",
            model.dim(),
            test.dim()
        )));
    }
    let total = test.total_weight();
    if total <= 0.0 {
        return Err(Error::config("test set has zero total weight"));
    }
    let lp = model.log_density_batch(test.points())?;
    for (j, &v) in lp.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::numeric(format!("log-density at test point {j}"), v));
        }
    }
    let mean = lp
        .iter()
        .zip(test.weights())
        .map(|(&v, &w)| w * v)
        .sum::<f64>()
        / total;
    if test.len() < 2 {
        return Ok((mean, f64::INFINITY));
    }
    let var = lp
        .iter()
        .zip(test.weights())
        .map(|(&v, &w)| w * (v - mean).powi(2))
        .sum::<f64>()
        / total;
    let sum_sq: f64 = test.weights().iter().map(|&w| w * w).sum();
    let n_eff = total * total / sum_sq;
    Ok((mean, 2.0 * var.sqrt() / n_eff.sqrt()))
}

/// KL estimates pooled over repeated training runs.
#[derive(Clone, Debug)]
pub struct RunAggregate {
    pub runs: Vec<KlEstimate>,
    pub mean: f64,
    /// Per-run errors added in quadrature: sqrt(Σ errᵢ²)/R.
    pub combined_error: f64,
}

pub fn aggregate(runs: Vec<KlEstimate>) -> Result<RunAggregate> {
    if runs.is_empty() {
        return Err(Error::config("aggregate of zero runs"));
    }
    let r = runs.len() as f64;
    let mean = runs.iter().map(|e| e.value).sum::<f64>() / r;
    let combined_error = runs.iter().map(|e| e.mc_error * e.mc_error).sum::<f64>().sqrt() / r;
    Ok(RunAggregate { runs, mean, combined_error })
}

/// Default quadrature window and resolution for 2-D normalization checks.
pub const QUADRATURE_LO: f64 = -8.0;
pub const QUADRATURE_HI: f64 = 8.0;
pub const QUADRATURE_CELLS: usize = 1600;

/// Midpoint-rule integral of exp(log_density) over [lo, hi]², `cells` cells
/// per axis. Rows are evaluated in parallel but summed in a fixed order, so
/// the result is deterministic.
pub fn quadrature_2d(density: &dyn LogDensity, lo: f64, hi: f64, cells: usize) -> Result<f64> {
    if density.dim() != 2 {
        return Err(Error::config(format!(
            "grid quadrature is 2-D only; density has dimension {}",
            density.dim()
        )));
    }
    if !(hi > lo) || cells == 0 {
        return Err(Error::config("quadrature needs hi > lo and at least one cell"));
    }
    let h = (hi - lo) / cells as f64;
    let row_sums: Vec<Result<f64>> = (0..cells)
        .into_par_iter()
        .map(|i| {
            let y = lo + (i as f64 + 0.5) * h;
            let mut pts = Matrix::zeros(cells, 2);
            for j in 0..cells {
                let row = pts.row_mut(j);
                row[0] = lo + (j as f64 + 0.5) * h;
                row[1] = y;
            }
            let lp = density.log_density_batch(&pts)?;
            Ok(lp.iter().map(|&v| v.exp()).sum::<f64>())
        })
        .collect();
    let mut total = 0.0;
    for rs in row_sums {
        total += rs?;
    }
    Ok(total * h * h)
}

/// [`quadrature_2d`] over the default window.
pub fn unit_mass(density: &dyn LogDensity) -> Result<f64> {
    quadrature_2d(density, QUADRATURE_LO, QUADRATURE_HI, QUADRATURE_CELLS)
}
