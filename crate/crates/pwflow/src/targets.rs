//! Analytic 2-D benchmark targets. Each target couples a seeded sampler with
//! a normalized log-density, which is exactly what the Monte Carlo KL
//! estimator needs on its reference side.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{logsumexp, Matrix};
use crate::samples::WeightedSampleSet;

const LN_TWO_PI: f64 = crate::maf::LN_TWO_PI;

/// Circle of Gaussians: mode count, ring radius, per-mode std.
pub const CIRCLE_MODES: usize = 8;
pub const CIRCLE_RADIUS: f64 = 4.0;
pub const CIRCLE_SIGMA: f64 = 0.3;

/// Two rings: radii and the std of the Gaussian radial profile.
pub const RING_RADII: [f64; 2] = [2.0, 4.0];
pub const RING_SIGMA: f64 = 0.2;

/// Two moons: arc radius, isotropic noise std, center offsets, and how many
/// Gaussian nodes discretize each half-circle arc. At this node spacing
/// (σ/16) the mixture is indistinguishable from the continuous arc
/// convolution except ~1e-4 relative near the arc tips.
pub const MOON_RADIUS: f64 = 2.0;
pub const MOON_SIGMA: f64 = 0.2;
pub const MOON_CENTER: [f64; 2] = [-1.0, -0.5];
pub const MOON_NODES: usize = 512;

/// A named 2-D target distribution with sampler and normalized log-density.
pub struct Target {
    name: &'static str,
    kind: Kind,
}

enum Kind {
    /// Equal-weight mixture of isotropic Gaussians; covers the circle of
    /// Gaussians and (with many arc nodes) the two moons.
    IsotropicMixture { centers: Matrix, sigma: f64 },
    /// Equal mixture of concentric rings with Gaussian radial profiles.
    Rings { radii: [f64; 2], sigma: f64, log_norms: [f64; 2] },
}

impl Target {
    /// Eight equal Gaussians with their means spread around a circle.
    pub fn circle_of_gaussians() -> Target {
        let mut centers = Matrix::zeros(CIRCLE_MODES, 2);
        for m in 0..CIRCLE_MODES {
            let angle = 2.0 * std::f64::consts::PI * m as f64 / CIRCLE_MODES as f64;
            let row = centers.row_mut(m);
            row[0] = CIRCLE_RADIUS * angle.cos();
            row[1] = CIRCLE_RADIUS * angle.sin();
        }
        Target {
            name: "circle-of-gaussians",
            kind: Kind::IsotropicMixture { centers, sigma: CIRCLE_SIGMA },
        }
    }

    /// Two interleaved crescents. Each moon is a half-circle arc convolved
    /// with isotropic Gaussian noise, realized as an equal-weight mixture of
    /// [`MOON_NODES`] Gaussians along the arc, so the density is smooth,
    /// exactly normalized, and evaluable in closed form. The second moon's
    /// nodes are the literal negation of the first moon's, making the density
    /// exactly symmetric under x ↦ −x.
    pub fn two_moons() -> Target {
        let m = MOON_NODES;
        let mut centers = Matrix::zeros(2 * m, 2);
        for j in 0..m {
            let t = (j as f64 + 0.5) * std::f64::consts::PI / m as f64;
            let x = MOON_CENTER[0] + MOON_RADIUS * t.cos();
            let y = MOON_CENTER[1] + MOON_RADIUS * t.sin();
            centers.row_mut(j).copy_from_slice(&[x, y]);
            centers.row_mut(m + j).copy_from_slice(&[-x, -y]);
        }
        Target { name: "two-moons", kind: Kind::IsotropicMixture { centers, sigma: MOON_SIGMA } }
    }

    /// Two concentric rings with Gaussian radial profiles, normalized in
    /// closed form (polar integration of s·exp(−(s−r)²/2σ²)).
    pub fn two_rings() -> Target {
        let log_norms = [
            ring_normalization(RING_RADII[0], RING_SIGMA).ln(),
            ring_normalization(RING_RADII[1], RING_SIGMA).ln(),
        ];
        Target {
            name: "two-rings",
            kind: Kind::Rings { radii: RING_RADII, sigma: RING_SIGMA, log_norms },
        }
    }

    pub fn all() -> Vec<Target> {
        vec![Target::circle_of_gaussians(), Target::two_moons(), Target::two_rings()]
    }

    pub fn by_name(name: &str) -> Result<Target> {
        match name {
            "circle-of-gaussians" => Ok(Target::circle_of_gaussians()),
            "two-moons" => Ok(Target::two_moons()),
            "two-rings" => Ok(Target::two_rings()),
            other => Err(Error::config(format!(
                "unknown target '{other}'; expected one of circle-of-gaussians, two-moons, two-rings"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn dim(&self) -> usize {
        2
    }

    /// Normalized log-density at `x`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != 2 {
            return Err(Error::shape(
                "target log_density",
                format!("expected a 2-D point, got length {}", x.len()),
            ));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("target log_density input", x[0]));
        }
        Ok(match &self.kind {
            Kind::IsotropicMixture { centers, sigma } => {
                let inv_two_var = 1.0 / (2.0 * sigma * sigma);
                let exponents: Vec<f64> = (0..centers.rows())
                    .map(|j| {
                        let c = centers.row(j);
                        let dx = x[0] - c[0];
                        let dy = x[1] - c[1];
                        -(dx * dx + dy * dy) * inv_two_var
                    })
                    .collect();
                logsumexp(&exponents)
                    - (centers.rows() as f64).ln()
                    - LN_TWO_PI
                    - 2.0 * sigma.ln()
            }
            Kind::Rings { radii, sigma, log_norms } => {
                let s = (x[0] * x[0] + x[1] * x[1]).sqrt();
                let inv_two_var = 1.0 / (2.0 * sigma * sigma);
                let terms = [
                    -(s - radii[0]).powi(2) * inv_two_var - log_norms[0],
                    -(s - radii[1]).powi(2) * inv_two_var - log_norms[1],
                ];
                logsumexp(&terms) - 2.0f64.ln()
            }
        })
    }

    /// `n` seeded draws with unit weights.
    pub fn sample(&self, n: usize, seed: u64) -> Result<WeightedSampleSet> {
        if n == 0 {
            return Err(Error::config("cannot sample zero points"));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut pts = Matrix::zeros(n, 2);
        match &self.kind {
            Kind::IsotropicMixture { centers, sigma } => {
                for i in 0..n {
                    let c = centers.row(rng.random_range(0..centers.rows()));
                    let e1: f64 = StandardNormal.sample(&mut rng);
                    let e2: f64 = StandardNormal.sample(&mut rng);
                    let row = pts.row_mut(i);
                    row[0] = c[0] + sigma * e1;
                    row[1] = c[1] + sigma * e2;
                }
            }
            Kind::Rings { radii, sigma, .. } => {
                for i in 0..n {
                    let r = radii[usize::from(rng.random::<f64>() < 0.5)];
                    let s = sample_ring_radius(&mut rng, r, *sigma);
                    let theta = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
                    let row = pts.row_mut(i);
                    row[0] = s * theta.cos();
                    row[1] = s * theta.sin();
                }
            }
        }
        Ok(WeightedSampleSet::unit_weights(pts))
    }
}

/// Normalization constant of one ring: ∫ exp(−(‖x‖−r)²/(2σ²)) dx over the
/// plane, by polar coordinates.
fn ring_normalization(r: f64, sigma: f64) -> f64 {
    let half = std::f64::consts::PI / 2.0;
    2.0 * std::f64::consts::PI
        * (sigma * sigma * (-r * r / (2.0 * sigma * sigma)).exp()
            + r * sigma * half.sqrt() * (1.0 + erf(r / (2.0f64.sqrt() * sigma))))
}

/// Rational-approximation erf, |error| < 1.5e-7. Plenty for the ring
/// normalization, where the erf argument is ≥ r/(√2σ) ≈ 7 and erf is 1 to
/// machine precision anyway.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Draws a radius with density ∝ s·exp(−(s−r)²/(2σ²)): propose s = r + σu
/// with u standard normal truncated to |u| ≤ 8, accept with probability
/// s/(r+8σ). The truncation discards ~1e-15 of the mass.
fn sample_ring_radius(rng: &mut ChaCha12Rng, r: f64, sigma: f64) -> f64 {
    let bound = r + 8.0 * sigma;
    loop {
        let u: f64 = StandardNormal.sample(rng);
        if u.abs() > 8.0 {
            continue;
        }
        let s = r + sigma * u;
        if s > 0.0 && rng.random::<f64>() < s / bound {
            return s;
        }
    }
}
