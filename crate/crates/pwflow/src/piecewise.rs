//! Piecewise flows: cluster the target samples, train one MAF per cluster,
//! and compose the pieces into a mixture whose weights are the normalized
//! cluster weights. The mixture has exact log-density (log-sum-exp over the
//! components) and samples by first drawing a component, then inverting its
//! flow on a standard-normal point.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::clustering::{select_k_with, Clustering, ClusteringStrategy, WeightedKMeans};
use crate::error::{Error, Result};
use crate::made::network_parameter_count;
use crate::maf::{push_f64, push_u32, push_u64, MafModel, Reader, DEFAULT_BLOCKS};
use crate::numerics::{derive_seed, logsumexp, Matrix};
use crate::samples::WeightedSampleSet;
use crate::training::{train, TrainingConfig, TrainingReport};

const PNF_MAGIC: &[u8; 8] = b"PWFPNF01";
const SEED_CLUSTERING: u64 = 0x434c_5553;
const SEED_COMPONENT: u64 = 0x434f_4d50;

/// Maximum allowed relative miss between the summed component parameter
/// budget and the single-flow budget.
pub const PARITY_TOLERANCE: f64 = 0.15;

/// Seed used for component `index`'s network initialization and training
/// when fitting with master seed `master`. Public so a single component can
/// be reproduced in isolation: a piecewise fit with one fixed cluster equals
/// a bare MAF initialized and trained with `component_seed(master, 0)`.
pub fn component_seed(master: u64, index: usize) -> u64 {
    derive_seed(derive_seed(master, SEED_COMPONENT), index as u64)
}

/// How the number of clusters is chosen during a fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClusterSelection {
    Fixed(usize),
    /// Scan this inclusive range and keep the best mean silhouette.
    Auto { k_min: usize, k_max: usize },
}

#[derive(Clone, Debug)]
pub struct PiecewiseConfig {
    pub training: TrainingConfig,
    pub clusters: ClusterSelection,
    /// Hidden widths of the reference single flow. Components train with
    /// widths shrunk by [`parity_plan`] so their summed parameter count
    /// stays close to this budget.
    pub hidden: Vec<usize>,
    pub blocks: usize,
    /// Clusters smaller than this fail the fit rather than producing a
    /// meaningless density piece.
    pub min_cluster_size: usize,
    /// Thread cap for parallel component training; None uses the ambient
    /// rayon pool. Results are identical either way.
    pub threads: Option<usize>,
}

impl Default for PiecewiseConfig {
    fn default() -> Self {
        PiecewiseConfig {
            training: TrainingConfig::default(),
            clusters: ClusterSelection::Auto { k_min: 2, k_max: 12 },
            hidden: vec![32, 32],
            blocks: DEFAULT_BLOCKS,
            min_cluster_size: 25,
            threads: None,
        }
    }
}

impl PiecewiseConfig {
    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        if self.hidden.is_empty() || self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::config("hidden widths must be a non-empty list of positive sizes"));
        }
        if self.blocks == 0 {
            return Err(Error::config("a flow needs at least one block"));
        }
        if self.min_cluster_size < 5 {
            return Err(Error::config(
                "min_cluster_size below 5 cannot satisfy the train/test split",
            ));
        }
        match self.clusters {
            ClusterSelection::Fixed(k) if k == 0 => {
                Err(Error::config("cluster count must be at least 1"))
            }
            ClusterSelection::Auto { k_min, k_max } if k_min < 2 || k_min > k_max => {
                Err(Error::config(format!("invalid cluster scan range {k_min}..={k_max}")))
            }
            _ => Ok(()),
        }
    }
}

/// Per-component hidden widths sized so the summed parameter count
/// approximates a single reference flow's budget.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParityPlan {
    /// Parameter count of the reference single flow.
    pub budget: usize,
    /// Hidden widths each component network uses.
    pub widths: Vec<usize>,
    /// Parameter count of one component flow.
    pub component_params: usize,
    pub k: usize,
}

impl ParityPlan {
    pub fn total_params(&self) -> usize {
        self.k * self.component_params
    }

    pub fn relative_error(&self) -> f64 {
        (self.total_params() as f64 - self.budget as f64).abs() / self.budget as f64
    }
}

/// Finds a uniform integer hidden width for `k` components (same depth as
/// the reference) whose summed parameter count lands closest to the single
/// flow's. `k == 1` returns the reference widths unchanged.
pub fn parity_plan(
    single_hidden: &[usize],
    dim: usize,
    blocks: usize,
    k: usize,
) -> Result<ParityPlan> {
    if k == 0 || dim == 0 || blocks == 0 {
        return Err(Error::config("parity plan needs k, dim and blocks all positive"));
    }
    if single_hidden.is_empty() || single_hidden.iter().any(|&w| w == 0) {
        return Err(Error::config("parity plan needs non-empty positive hidden widths"));
    }
    let budget = blocks * network_parameter_count(dim, single_hidden);
    if k == 1 {
        return Ok(ParityPlan {
            budget,
            widths: single_hidden.to_vec(),
            component_params: budget,
            k,
        });
    }
    let depth = single_hidden.len();
    let params_at = |w: usize| blocks * network_parameter_count(dim, &vec![w; depth]);
    // Component parameters grow monotonically with width, so walk up until
    // the summed count passes the budget and compare the two bracketing
    // widths.
    let mut best_w = 1;
    let mut best_miss = (k * params_at(1)) as i64 - budget as i64;
    let mut w = 1;
    while (k * params_at(w)) < budget {
        w += 1;
        let miss = (k * params_at(w)) as i64 - budget as i64;
        if miss.abs() < best_miss.abs() {
            best_w = w;
            best_miss = miss;
        }
    }
    let component_params = params_at(best_w);
    let plan = ParityPlan { budget, widths: vec![best_w; depth], component_params, k };
    if plan.relative_error() > PARITY_TOLERANCE {
        return Err(Error::config(format!(
            "no integer width puts {k} components within {:.0}% of the {budget}-parameter budget \
             (closest: width {best_w}, {} total)",
            PARITY_TOLERANCE * 100.0,
            plan.total_params(),
        )));
    }
    Ok(plan)
}

/// Total training cost Σ E·N·h over the given reports, where E is epochs
/// run, N the samples used (train and test both pass through the network
/// every epoch) and h the parameter count.
pub fn training_cost(reports: &[TrainingReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::config("training cost of zero reports"));
    }
    Ok(reports
        .iter()
        .map(|r| r.epochs_run as f64 * r.samples_used as f64 * r.parameter_count as f64)
        .sum())
}

/// What a fit did: the clustering it used, the silhouette scan when the
/// cluster count was chosen automatically, the parity widths, and one
/// training report per component.
#[derive(Clone, Debug)]
pub struct FitReport {
    pub clustering: Clustering,
    /// (k values, mean silhouette per k) when clusters were scanned.
    pub scan: Option<(Vec<usize>, Vec<f64>)>,
    pub widths: Vec<usize>,
    pub reports: Vec<TrainingReport>,
}

impl FitReport {
    pub fn chosen_k(&self) -> usize {
        self.clustering.k()
    }
}

/// Samples plus their generation record: which component produced each point
/// and from which base-space latent.
#[derive(Clone, Debug)]
pub struct ProvenancedSamples {
    pub points: Matrix,
    pub components: Vec<usize>,
    pub latents: Matrix,
}

/// A mixture of MAF components with positive weights summing to one.
#[derive(Clone, Debug)]
pub struct PiecewiseFlow {
    components: Vec<MafModel>,
    weights: Vec<f64>,
}

impl PiecewiseFlow {
    /// Builds a mixture from components and raw (unnormalized) positive
    /// weights, typically the cluster weights W_k.
    pub fn new(parts: Vec<(MafModel, f64)>) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::config("a piecewise flow needs at least one component"));
        }
        let dim = parts[0].0.dim();
        let mut total = 0.0;
        for (i, (model, w)) in parts.iter().enumerate() {
            if model.dim() != dim {
                return Err(Error::config(format!(
                    "component {i} has dimension {} but component 0 has {dim}",
                    model.dim()
                )));
            }
            if !w.is_finite() || *w <= 0.0 {
                return Err(Error::config(format!("component {i} has non-positive weight {w}")));
            }
            total += *w;
        }
        let (components, weights) =
            parts.into_iter().map(|(m, w)| (m, w / total)).unzip();
        Ok(PiecewiseFlow { components, weights })
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[MafModel] {
        &self.components
    }

    pub fn component(&self, i: usize) -> &MafModel {
        &self.components[i]
    }

    /// Normalized mixture weights; they sum to one.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mixture log-density: log Σ_k Ŵ_k p_k(x), overflow-safe.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.components.len());
        for (model, &w) in self.components.iter().zip(&self.weights) {
            terms.push(w.ln() + model.log_prob(x)?);
        }
        Ok(logsumexp(&terms))
    }

    pub fn log_prob_batch(&self, xs: &Matrix) -> Result<Vec<f64>> {
        if xs.cols() != self.dim() {
            return Err(Error::shape(
                "piecewise log_prob",
                format!("points have dimension {}, flow has {}", xs.cols(), self.dim()),
            ));
        }
        let per_component: Vec<Vec<f64>> = self
            .components
            .iter()
            .map(|m| m.log_prob_batch(xs))
            .collect::<Result<_>>()?;
        let log_w: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        let mut terms = vec![0.0; self.components.len()];
        let mut out = Vec::with_capacity(xs.rows());
        for j in 0..xs.rows() {
            for (i, lp) in per_component.iter().enumerate() {
                terms[i] = log_w[i] + lp[j];
            }
            out.push(logsumexp(&terms));
        }
        Ok(out)
    }

    /// Draws `n` points with full provenance. One RNG stream: each draw
    /// consumes one uniform (component choice by inverse CDF over the
    /// cumulative weights) and D normals, so results do not depend on how
    /// the per-component inversions are batched afterwards.
    pub fn sample_with_provenance(&self, n: usize, seed: u64) -> Result<ProvenancedSamples> {
        if n == 0 {
            return Err(Error::config("cannot sample zero points"));
        }
        let d = self.dim();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut latents = Matrix::zeros(n, d);
        let mut components = Vec::with_capacity(n);
        for j in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = self.weights.len() - 1;
            for (i, &w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            components.push(pick);
            for v in latents.row_mut(j) {
                *v = StandardNormal.sample(&mut rng);
            }
        }

        let mut points = Matrix::zeros(n, d);
        for (i, model) in self.components.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&j| components[j] == i).collect();
            if rows.is_empty() {
                continue;
            }
            let mut z = Matrix::zeros(rows.len(), d);
            for (r, &j) in rows.iter().enumerate() {
                z.row_mut(r).copy_from_slice(latents.row(j));
            }
            let x = model.inverse_batch(&z)?;
            for (r, &j) in rows.iter().enumerate() {
                points.row_mut(j).copy_from_slice(x.row(r));
            }
        }
        Ok(ProvenancedSamples { points, components, latents })
    }

    /// Draws `n` points with unit weights.
    pub fn sample(&self, n: usize, seed: u64) -> Result<WeightedSampleSet> {
        Ok(WeightedSampleSet::unit_weights(self.sample_with_provenance(n, seed)?.points))
    }

    /// Clusters the samples, trains one component per cluster and composes
    /// the mixture. Component `i` initializes and trains with
    /// [`component_seed`]`(cfg.training.seed, i)`; with a fixed single
    /// cluster the result is bit-identical to training one bare MAF with
    /// that seed.
    pub fn fit(
        samples: &WeightedSampleSet,
        cfg: &PiecewiseConfig,
    ) -> Result<(PiecewiseFlow, FitReport)> {
        Self::fit_with(&WeightedKMeans::default(), samples, cfg)
    }

    /// [`fit`](Self::fit) with a caller-provided clustering strategy.
    pub fn fit_with(
        strategy: &dyn ClusteringStrategy,
        samples: &WeightedSampleSet,
        cfg: &PiecewiseConfig,
    ) -> Result<(PiecewiseFlow, FitReport)> {
        cfg.validate()?;
        let master = cfg.training.seed;
        let cluster_seed = derive_seed(master, SEED_CLUSTERING);
        let (clustering, scan) = match cfg.clusters {
            ClusterSelection::Fixed(k) => (strategy.fit(samples, k, cluster_seed)?, None),
            ClusterSelection::Auto { k_min, k_max } => {
                let scan = select_k_with(strategy, samples, k_min, k_max, cluster_seed)?;
                (scan.best, Some((scan.ks, scan.scores)))
            }
        };
        let k = clustering.k();
        let plan = parity_plan(&cfg.hidden, samples.dim(), cfg.blocks, k)?;

        let mut jobs = Vec::with_capacity(k);
        for c in 0..k {
            let members = clustering.members(c);
            if members.len() < cfg.min_cluster_size {
                return Err(Error::config(format!(
                    "cluster {c} has only {} samples; training needs at least {}",
                    members.len(),
                    cfg.min_cluster_size
                )));
            }
            let subset = samples.subset(&members)?;
            let mut tcfg = cfg.training.clone();
            tcfg.seed = component_seed(master, c);
            if let Some(b) = tcfg.batch_size {
                // Scale minibatches with the cluster's share so every
                // component runs about as many steps per epoch as the
                // reference flow; exact passthrough when k == 1.
                let scaled =
                    (b as f64 * subset.len() as f64 / samples.len() as f64).round() as usize;
                tcfg.batch_size = Some(scaled.max(1));
            }
            jobs.push((subset, tcfg));
        }

        let dim = samples.dim();
        let train_one = |(subset, tcfg): &(WeightedSampleSet, TrainingConfig)| {
            let mut model = MafModel::new(dim, &plan.widths, cfg.blocks, tcfg.seed)?;
            let report = train(&mut model, subset, tcfg)?;
            Ok((model, report))
        };
        let outcomes: Vec<Result<(MafModel, TrainingReport)>> = match cfg.threads {
            Some(t) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build()
                    .map_err(|e| Error::config(format!("cannot build a {t}-thread pool: {e}")))?;
                pool.install(|| jobs.par_iter().map(train_one).collect())
            }
            None => jobs.par_iter().map(train_one).collect(),
        };

        let mut parts = Vec::with_capacity(k);
        let mut reports = Vec::with_capacity(k);
        let mut failures = Vec::new();
        for (c, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                Ok((model, report)) => {
                    parts.push((model, clustering.cluster_weights()[c]));
                    reports.push(report);
                }
                Err(e) => failures.push((c, Box::new(e))),
            }
        }
        if !failures.is_empty() {
            return Err(Error::ClusterTraining { failures });
        }
        let flow = PiecewiseFlow::new(parts)?;
        let report = FitReport { clustering, scan, widths: plan.widths.clone(), reports };
        Ok((flow, report))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(PNF_MAGIC);
        push_u32(&mut buf, self.components.len() as u32);
        push_u32(&mut buf, self.dim() as u32);
        for &w in &self.weights {
            push_f64(&mut buf, w);
        }
        for model in &self.components {
            let blob = model.to_bytes();
            push_u64(&mut buf, blob.len() as u64);
            buf.extend_from_slice(&blob);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != PNF_MAGIC {
            return Err(Error::format(None, "not a piecewise flow file (bad magic)"));
        }
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if k == 0 || k > 65_536 || dim == 0 || dim > 65_536 {
            return Err(Error::format(None, "implausible component count or dimension"));
        }
        let mut weights = Vec::with_capacity(k);
        for _ in 0..k {
            let w = r.f64()?;
            if !w.is_finite() || w <= 0.0 {
                return Err(Error::format(None, "component weights must be positive"));
            }
            weights.push(w);
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::format(
                None,
                format!("component weights sum to {total}, expected 1"),
            ));
        }
        let mut components = Vec::with_capacity(k);
        for _ in 0..k {
            let len = r.u64()? as usize;
            let model = MafModel::from_bytes(r.take(len)?)?;
            if model.dim() != dim {
                return Err(Error::format(None, "component dimension mismatch"));
            }
            components.push(model);
        }
        r.finish()?;
        Ok(PiecewiseFlow { components, weights })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }
}
