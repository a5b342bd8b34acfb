use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Matrix};
use crate::samples::WeightedSampleSet;

/// A hard partition of a sample set.
#[derive(Clone, Debug)]
pub struct Clustering {
    labels: Vec<usize>,
    centroids: Matrix,
    /// Total sample weight per cluster.
    cluster_weights: Vec<f64>,
    /// Weighted within-cluster sum of squared distances.
    objective: f64,
    iterations: usize,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        self.centroids.row(c)
    }

    pub fn cluster_weights(&self) -> &[f64] {
        &self.cluster_weights
    }

    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Sample indices belonging to cluster `c`, in input order.
    pub fn members(&self, c: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == c).then_some(i))
            .collect()
    }
}

/// Anything that can partition a weighted sample set into `k` clusters.
/// The default implementation is [`WeightedKMeans`]; alternative clusterers
/// slot in through this trait.
pub trait ClusteringStrategy: Sync {
    fn fit(&self, samples: &WeightedSampleSet, k: usize, seed: u64) -> Result<Clustering>;
}

/// Lloyd's algorithm with weight-aware k-means++ seeding, weighted centroid
/// updates and farthest-point repair for emptied clusters. Each call runs
/// `restarts` independent seedings and keeps the lowest-objective result,
/// which is what makes mode detection on well-separated data reliable.
#[derive(Clone, Debug)]
pub struct WeightedKMeans {
    pub max_iter: usize,
    pub restarts: usize,
}

impl Default for WeightedKMeans {
    fn default() -> Self {
        WeightedKMeans { max_iter: DEFAULT_MAX_ITER, restarts: DEFAULT_RESTARTS }
    }
}

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_RESTARTS: usize = 8;

impl ClusteringStrategy for WeightedKMeans {
    fn fit(&self, samples: &WeightedSampleSet, k: usize, seed: u64) -> Result<Clustering> {
        if k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if k > samples.len() {
            return Err(Error::config(format!(
                "cannot form {k} clusters from {} samples",
                samples.len()
            )));
        }
        if self.max_iter == 0 || self.restarts == 0 {
            return Err(Error::config("max_iter and restarts must be positive"));
        }
        if samples.total_weight() <= 0.0 {
            return Err(Error::config("clustering requires positive total weight"));
        }
        let mut best: Option<Clustering> = None;
        for r in 0..self.restarts {
            let run = lloyd_run(samples, k, derive_seed(seed, r as u64), self.max_iter)?;
            let better = match &best {
                None => true,
                Some(b) => run.objective < b.objective,
            };
            if better {
                best = Some(run);
            }
        }
        Ok(best.expect("at least one restart"))
    }
}

/// Weighted k-means clustering of `samples` into `k` groups.
pub fn kmeans(samples: &WeightedSampleSet, k: usize, seed: u64, max_iter: usize) -> Result<Clustering> {
    WeightedKMeans { max_iter, restarts: DEFAULT_RESTARTS }.fit(samples, k, seed)
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Draws an index from the categorical distribution given by `weights`
/// (non-negative, not all zero). Falls back to the first positive weight on
/// numerical edge cases.
fn weighted_pick(rng: &mut ChaCha12Rng, weights: &[f64], total: f64) -> usize {
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights
        .iter()
        .rposition(|&w| w > 0.0)
        .expect("weights not all zero")
}

fn lloyd_run(samples: &WeightedSampleSet, k: usize, seed: u64, max_iter: usize) -> Result<Clustering> {
    let n = samples.len();
    let d = samples.dim();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // k-means++ seeding, weighted: the first centroid is drawn by sample
    // weight, later ones by weight times squared distance to the nearest
    // chosen centroid.
    let mut centroids = Matrix::zeros(k, d);
    let first = weighted_pick(&mut rng, samples.weights(), samples.total_weight());
    centroids.row_mut(0).copy_from_slice(samples.point(first));
    let mut nearest_sq: Vec<f64> = (0..n)
        .map(|i| sqdist(samples.point(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let scores: Vec<f64> = (0..n)
            .map(|i| samples.weight(i) * nearest_sq[i])
            .collect();
        let total: f64 = scores.iter().sum();
        let pick = if total > 0.0 {
            weighted_pick(&mut rng, &scores, total)
        } else {
            // All remaining mass sits on chosen centroids (duplicate points);
            // take the first sample not already used as a centroid.
            (0..n)
                .find(|&i| (0..c).all(|cc| sqdist(samples.point(i), centroids.row(cc)) > 0.0))
                .unwrap_or(c % n)
        };
        centroids.row_mut(c).copy_from_slice(samples.point(pick));
        for i in 0..n {
            let ds = sqdist(samples.point(i), centroids.row(c));
            if ds < nearest_sq[i] {
                nearest_sq[i] = ds;
            }
        }
    }

    let mut labels = vec![0usize; n];
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        // Assignment step; ties break toward the lower centroid index.
        let mut changed = false;
        for i in 0..n {
            let p = samples.point(i);
            let mut best_c = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let ds = sqdist(p, centroids.row(c));
                if ds < best_d {
                    best_d = ds;
                    best_c = c;
                }
            }
            if labels[i] != best_c {
                labels[i] = best_c;
                changed = true;
            }
        }

        // Empty-cluster repair: the point farthest from its current centroid
        // becomes a singleton centroid (only points from clusters that keep
        // at least two members are eligible).
        let mut counts = vec![0usize; k];
        let mut wsums = vec![0.0; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            wsums[labels[i]] += samples.weight(i);
        }
        for c in 0..k {
            if counts[c] > 0 && wsums[c] > 0.0 {
                continue;
            }
            let mut far_i = None;
            let mut far_d = -1.0;
            for i in 0..n {
                if counts[labels[i]] < 2 {
                    continue;
                }
                let ds = sqdist(samples.point(i), centroids.row(labels[i]));
                if ds > far_d {
                    far_d = ds;
                    far_i = Some(i);
                }
            }
            let Some(i) = far_i else {
                return Err(Error::config(format!(
                    "cannot form {k} non-empty clusters from {n} samples"
                )));
            };
            counts[labels[i]] -= 1;
            wsums[labels[i]] -= samples.weight(i);
            labels[i] = c;
            counts[c] = 1;
            wsums[c] = samples.weight(i);
            centroids.row_mut(c).copy_from_slice(samples.point(i));
            changed = true;
        }

        // Update step: weighted means. Zero-weight clusters keep their
        // current centroid (their members are weightless).
        let mut sums = Matrix::zeros(k, d);
        for i in 0..n {
            let w = samples.weight(i);
            let row = sums.row_mut(labels[i]);
            for (s, &x) in row.iter_mut().zip(samples.point(i)) {
                *s += w * x;
            }
        }
        for c in 0..k {
            if wsums[c] > 0.0 {
                let row = centroids.row_mut(c);
                for (cv, &s) in row.iter_mut().zip(sums.row(c)) {
                    *cv = s / wsums[c];
                }
            }
        }

        if !changed {
            break;
        }
    }

    let mut cluster_weights = vec![0.0; k];
    let mut objective = 0.0;
    for i in 0..n {
        cluster_weights[labels[i]] += samples.weight(i);
        objective += samples.weight(i) * sqdist(samples.point(i), centroids.row(labels[i]));
    }
    Ok(Clustering { labels, centroids, cluster_weights, objective, iterations })
}

/// Cap on the number of points entering the O(n^2) silhouette computation.
pub const SILHOUETTE_SUBSAMPLE: usize = 2000;
const SILHOUETTE_SEED: u64 = 0x514c_4855;

/// Mean silhouette coefficient of a labeled sample set. Sets larger than
/// [`SILHOUETTE_SUBSAMPLE`] are subsampled with a fixed internal seed, so the
/// score is deterministic for a given input. Singleton clusters contribute 0
/// for their lone point. Weights are ignored; the silhouette is a purely
/// geometric diagnostic here.
pub fn silhouette(samples: &WeightedSampleSet, labels: &[usize]) -> Result<f64> {
    if labels.len() != samples.len() {
        return Err(Error::shape(
            "silhouette",
            format!("{} labels for {} samples", labels.len(), samples.len()),
        ));
    }
    if samples.is_empty() {
        return Err(Error::config("silhouette of an empty sample set"));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    if k < 2 {
        return Err(Error::config("silhouette needs at least 2 clusters"));
    }

    let indices: Vec<usize> = if samples.len() > SILHOUETTE_SUBSAMPLE {
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(SILHOUETTE_SEED, samples.len() as u64));
        for i in (1..idx.len()).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        idx.truncate(SILHOUETTE_SUBSAMPLE);
        idx
    } else {
        (0..samples.len()).collect()
    };

    let m = indices.len();
    let mut counts = vec![0usize; k];
    for &i in &indices {
        counts[labels[i]] += 1;
    }

    let mut acc = 0.0;
    let mut dist_sums = vec![0.0; k];
    for (a_pos, &i) in indices.iter().enumerate() {
        let own = labels[i];
        if counts[own] <= 1 {
            continue; // silhouette of a singleton is 0
        }
        dist_sums.iter_mut().for_each(|v| *v = 0.0);
        let pi = samples.point(i);
        for (b_pos, &j) in indices.iter().enumerate() {
            if a_pos == b_pos {
                continue;
            }
            dist_sums[labels[j]] += sqdist(pi, samples.point(j)).sqrt();
        }
        let a = dist_sums[own] / (counts[own] - 1) as f64;
        let mut b = f64::INFINITY;
        for c in 0..k {
            if c != own && counts[c] > 0 {
                b = b.min(dist_sums[c] / counts[c] as f64);
            }
        }
        if !b.is_finite() {
            continue; // no other populated cluster in the subsample
        }
        let denom = a.max(b);
        if denom > 0.0 {
            acc += (b - a) / denom;
        }
    }
    Ok(acc / m as f64)
}

/// Silhouette scores across a range of cluster counts.
#[derive(Clone, Debug)]
pub struct ClusterScan {
    pub ks: Vec<usize>,
    pub scores: Vec<f64>,
    pub chosen_k: usize,
    /// The clustering for `chosen_k`.
    pub best: Clustering,
}

/// Runs k-means for every k in `[k_min, k_max]`, scores each partition by
/// mean silhouette, and picks the k with the highest score (smallest k on
/// ties). Scans run in parallel; each k gets an independent derived seed, so
/// the result does not depend on scheduling.
pub fn select_k(samples: &WeightedSampleSet, k_min: usize, k_max: usize, seed: u64) -> Result<ClusterScan> {
    select_k_with(&WeightedKMeans::default(), samples, k_min, k_max, seed)
}

/// [`select_k`] with a caller-provided clustering strategy.
pub fn select_k_with(
    strategy: &dyn ClusteringStrategy,
    samples: &WeightedSampleSet,
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<ClusterScan> {
    if k_min < 2 {
        return Err(Error::config(format!("k_min must be at least 2, got {k_min}")));
    }
    if k_min > k_max {
        return Err(Error::config(format!("empty scan range {k_min}..={k_max}")));
    }
    if k_max > samples.len() {
        return Err(Error::config(format!(
            "k_max {k_max} exceeds the number of samples {}",
            samples.len()
        )));
    }
    let ks: Vec<usize> = (k_min..=k_max).collect();
    let runs: Vec<Result<(Clustering, f64)>> = ks
        .par_iter()
        .map(|&k| {
            let clustering = strategy.fit(samples, k, derive_seed(seed, k as u64))?;
            let score = silhouette(samples, clustering.labels())?;
            Ok((clustering, score))
        })
        .collect();

    let mut scores = Vec::with_capacity(ks.len());
    let mut clusterings = Vec::with_capacity(ks.len());
    for run in runs {
        let (clustering, score) = run?;
        scores.push(score);
        clusterings.push(clustering);
    }
    let mut best_pos = 0;
    for (pos, &s) in scores.iter().enumerate() {
        if s > scores[best_pos] {
            best_pos = pos;
        }
    }
    let chosen_k = ks[best_pos];
    let best = clusterings.swap_remove(best_pos);
    Ok(ClusterScan { ks, scores, chosen_k, best })
}
