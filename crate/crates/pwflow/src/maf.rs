use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::made::{identity_ordering, reversed_ordering, MadeNetwork};
use crate::numerics::{derive_seed, GradTape, Matrix, NodeId};
use crate::samples::WeightedSampleSet;

const MAF_MAGIC: &[u8; 8] = b"PWFMAF01";

/// Default number of chained MADE blocks; enough for the 2-D benchmarks.
pub const DEFAULT_BLOCKS: usize = 2;

/// Fixed per-dimension affine map `x -> (x - shift) / scale` applied before
/// the first block. Fitted once from training data, never optimized, and its
/// constant log-Jacobian is part of every density.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer { shift: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn new(shift: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if shift.len() != scale.len() {
            return Err(Error::shape(
                "Standardizer::new",
                format!("{} shifts vs {} scales", shift.len(), scale.len()),
            ));
        }
        if let Some(&bad) = shift.iter().chain(&scale).find(|v| !v.is_finite()) {
            return Err(Error::numeric("standardizer parameters", bad));
        }
        if let Some(&bad) = scale.iter().find(|&&s| s <= 0.0) {
            return Err(Error::numeric("standardizer scale (must be positive)", bad));
        }
        Ok(Standardizer { shift, scale })
    }

    /// Weighted per-dimension mean and standard deviation of `samples`.
    /// Degenerate dimensions get a floor so scales stay strictly positive.
    pub fn fit(samples: &WeightedSampleSet) -> Result<Self> {
        let total = samples.total_weight();
        if total <= 0.0 {
            return Err(Error::config("cannot standardize samples with zero total weight"));
        }
        let d = samples.dim();
        let mut mean = vec![0.0; d];
        for i in 0..samples.len() {
            let w = samples.weight(i);
            for (m, &x) in mean.iter_mut().zip(samples.point(i)) {
                *m += w * x;
            }
        }
        for m in &mut mean {
            *m /= total;
        }
        let mut var = vec![0.0; d];
        for i in 0..samples.len() {
            let w = samples.weight(i);
            for ((v, &m), &x) in var.iter_mut().zip(&mean).zip(samples.point(i)) {
                let dx = x - m;
                *v += w * dx * dx;
            }
        }
        let scale = var
            .iter()
            .map(|v| (v / total).sqrt().max(1e-9))
            .collect();
        Standardizer::new(mean, scale)
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn shift(&self) -> &[f64] {
        &self.shift
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// Log-Jacobian of the forward map: `-sum_i ln(scale_i)`.
    pub fn log_det(&self) -> f64 {
        -self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }

    fn apply_batch(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((v, &sh), &sc) in out.row_mut(r).iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = (*v - sh) / sc;
            }
        }
        out
    }

    fn invert_batch(&self, z: &Matrix) -> Matrix {
        let mut out = z.clone();
        for r in 0..out.rows() {
            for ((v, &sh), &sc) in out.row_mut(r).iter_mut().zip(&self.shift).zip(&self.scale) {
                *v = *v * sc + sh;
            }
        }
        out
    }
}

/// Result of mapping points through the flow: latent coordinates plus the
/// per-point log-Jacobian of the map.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub z: Matrix,
    pub log_det: Vec<f64>,
}

/// Masked autoregressive flow: a standardizer followed by a chain of MADE
/// blocks with alternating autoregressive orderings. The base distribution
/// is a standard normal in the latent space.
#[derive(Clone, Debug)]
pub struct MafModel {
    dim: usize,
    blocks: Vec<MadeNetwork>,
    standardizer: Standardizer,
}

impl MafModel {
    /// `n_blocks` MADE blocks with the given hidden widths; block `b` uses
    /// the identity ordering when even, reversed when odd. The standardizer
    /// starts as the identity, so a fresh model is exactly a standard normal.
    pub fn new(dim: usize, hidden_sizes: &[usize], n_blocks: usize, seed: u64) -> Result<Self> {
        if n_blocks == 0 {
            return Err(Error::config("a flow needs at least one block"));
        }
        let mut blocks = Vec::with_capacity(n_blocks);
        for b in 0..n_blocks {
            let ordering = if b % 2 == 0 { identity_ordering(dim) } else { reversed_ordering(dim) };
            blocks.push(MadeNetwork::new(dim, hidden_sizes, &ordering, derive_seed(seed, b as u64))?);
        }
        Ok(MafModel { dim, blocks, standardizer: Standardizer::identity(dim) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[MadeNetwork] {
        &self.blocks
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    pub fn set_standardizer(&mut self, s: Standardizer) -> Result<()> {
        if s.dim() != self.dim {
            return Err(Error::shape(
                "set_standardizer",
                format!("standardizer dim {} vs model dim {}", s.dim(), self.dim),
            ));
        }
        self.standardizer = s;
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(MadeNetwork::parameter_count).sum()
    }

    /// Trainable parameters across blocks, in a fixed canonical order.
    pub fn params(&self) -> Vec<&Matrix> {
        self.blocks.iter().flat_map(MadeNetwork::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.blocks.iter_mut().flat_map(MadeNetwork::params_mut).collect()
    }

    pub fn snapshot_params(&self) -> Vec<Matrix> {
        self.params().into_iter().cloned().collect()
    }

    pub fn restore_params(&mut self, snapshot: &[Matrix]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != snapshot.len() {
            return Err(Error::shape(
                "restore_params",
                format!("{} stored tensors vs {} live", snapshot.len(), params.len()),
            ));
        }
        for (live, saved) in params.iter_mut().zip(snapshot) {
            if live.shape() != saved.shape() {
                return Err(Error::shape(
                    "restore_params",
                    format!("{:?} vs {:?}", live.shape(), saved.shape()),
                ));
            }
            live.data_mut().copy_from_slice(saved.data());
        }
        Ok(())
    }

    /// Maps data points to latent coordinates, accumulating the log-Jacobian
    /// (standardizer constant plus `-sum log_sigma` per block).
    pub fn forward_batch(&self, x: &Matrix) -> Result<ForwardPass> {
        if x.cols() != self.dim {
            return Err(Error::shape(
                "forward_batch",
                format!("input has {} columns, model dim is {}", x.cols(), self.dim),
            ));
        }
        let mut cur = self.standardizer.apply_batch(x);
        let mut log_det = vec![self.standardizer.log_det(); x.rows()];
        for (bi, block) in self.blocks.iter().enumerate() {
            let (mu, ls) = block.conditionals_batch(&cur)?;
            for r in 0..cur.rows() {
                let mut ld = 0.0;
                let row = cur.row_mut(r);
                for ((v, &m), &s) in row.iter_mut().zip(mu.row(r)).zip(ls.row(r)) {
                    *v = (*v - m) * (-s).exp();
                    ld -= s;
                }
                log_det[r] += ld;
            }
            if !cur.all_finite() {
                let bad = cur.data().iter().copied().find(|v| !v.is_finite()).expect("non-finite");
                return Err(Error::numeric(format!("forward pass, block {bi}"), bad));
            }
        }
        Ok(ForwardPass { z: cur, log_det })
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let pass = self.forward_batch(&m)?;
        Ok((pass.z.row(0).to_vec(), pass.log_det[0]))
    }

    /// Maps latent points back to data space by sequential autoregressive
    /// inversion: one conditional pass per ordering position, blocks in
    /// reverse order, then the standardizer inverse.
    pub fn inverse_batch(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.dim {
            return Err(Error::shape(
                "inverse_batch",
                format!("input has {} columns, model dim is {}", z.cols(), self.dim),
            ));
        }
        let mut cur = z.clone();
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            let target = cur;
            let mut x = target.clone();
            for pos in 1..=self.dim {
                let (mu, ls) = block.conditionals_batch(&x)?;
                let coord = block.ordering()[pos - 1];
                for r in 0..x.rows() {
                    let v = mu.get(r, coord) + target.get(r, coord) * ls.get(r, coord).exp();
                    x.set(r, coord, v);
                }
            }
            if !x.all_finite() {
                let bad = x.data().iter().copied().find(|v| !v.is_finite()).expect("non-finite");
                return Err(Error::numeric(format!("inverse pass, block {bi}"), bad));
            }
            cur = x;
        }
        Ok(self.standardizer.invert_batch(&cur))
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, z.len(), z.to_vec())?;
        Ok(self.inverse_batch(&m)?.row(0).to_vec())
    }

    /// Exact log-density under the flow: standard-normal log-density of the
    /// latent image plus the accumulated log-Jacobian.
    pub fn log_prob_batch(&self, x: &Matrix) -> Result<Vec<f64>> {
        let pass = self.forward_batch(x)?;
        let d = self.dim as f64;
        let base_const = -0.5 * d * LN_TWO_PI;
        let mut out = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let sq: f64 = pass.z.row(r).iter().map(|v| v * v).sum();
            out.push(base_const - 0.5 * sq + pass.log_det[r]);
        }
        Ok(out)
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.log_prob_batch(&m)?[0])
    }

    /// Draws `n` points by inverse-transforming standard-normal latents.
    pub fn sample(&self, n: usize, seed: u64) -> Result<WeightedSampleSet> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut z = Matrix::zeros(n, self.dim);
        for v in z.data_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let x = self.inverse_batch(&z)?;
        Ok(WeightedSampleSet::unit_weights(x))
    }

    /// Weight-normalized negative log-likelihood of `batch`.
    pub fn loss(&self, batch: &WeightedSampleSet) -> Result<f64> {
        if batch.dim() != self.dim {
            return Err(Error::shape(
                "loss",
                format!("samples have dim {}, model dim is {}", batch.dim(), self.dim),
            ));
        }
        let total = batch.total_weight();
        if total <= 0.0 {
            return Err(Error::config("loss requires positive total sample weight"));
        }
        let logp = self.log_prob_batch(batch.points())?;
        let mut acc = 0.0;
        for (lp, &w) in logp.iter().zip(batch.weights()) {
            acc += w * lp;
        }
        let loss = -acc / total;
        if !loss.is_finite() {
            return Err(Error::numeric("loss", loss));
        }
        Ok(loss)
    }

    /// Records the same loss on a gradient tape. Returns the scalar loss
    /// node and the parameter nodes in [`params`] order.
    ///
    /// [`params`]: MafModel::params
    pub fn loss_taped(
        &self,
        tape: &mut GradTape,
        points: &Matrix,
        weights: &[f64],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        if points.cols() != self.dim {
            return Err(Error::shape(
                "loss_taped",
                format!("samples have dim {}, model dim is {}", points.cols(), self.dim),
            ));
        }
        if points.rows() != weights.len() {
            return Err(Error::shape(
                "loss_taped",
                format!("{} points vs {} weights", points.rows(), weights.len()),
            ));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::config("loss requires positive total sample weight"));
        }

        let x = tape.constant(points.clone());
        let neg_shift = tape.constant(Matrix::row_vector(
            self.standardizer.shift().iter().map(|s| -s).collect(),
        ));
        let inv_scale = tape.constant(Matrix::row_vector(
            self.standardizer.scale().iter().map(|s| 1.0 / s).collect(),
        ));
        let shifted = tape.add_row(x, neg_shift)?;
        let mut cur = tape.mul_row(shifted, inv_scale)?;

        let mut param_ids = Vec::new();
        let mut neg_ls_sums: Vec<NodeId> = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (mu, ls) = block.conditionals_taped(tape, cur, &mut param_ids)?;
            let diff = tape.sub(cur, mu)?;
            let neg_ls = tape.scale(ls, -1.0);
            let inv_sigma = tape.exp(neg_ls);
            cur = tape.mul(diff, inv_sigma)?;
            neg_ls_sums.push(tape.sum_rows(neg_ls));
        }

        let zsq = tape.mul(cur, cur)?;
        let sq_sum = tape.sum_rows(zsq);
        let d = self.dim as f64;
        let base = tape.scale(sq_sum, -0.5);
        let mut logp = tape.add_scalar(base, -0.5 * d * LN_TWO_PI + self.standardizer.log_det());
        for nls in neg_ls_sums {
            logp = tape.add(logp, nls)?;
        }
        let w_row = tape.constant(Matrix::row_vector(weights.to_vec()));
        let weighted = tape.matmul(w_row, logp)?;
        let loss = tape.scale(weighted, -1.0 / total);
        Ok((loss, param_ids))
    }

    /// Serialized form; byte-exact round trip.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAF_MAGIC);
        push_u32(&mut buf, self.dim as u32);
        push_u32(&mut buf, self.blocks.len() as u32);
        let hidden = self.blocks[0].hidden_sizes();
        push_u32(&mut buf, hidden.len() as u32);
        for &h in hidden {
            push_u32(&mut buf, h as u32);
        }
        for block in &self.blocks {
            for &c in block.ordering() {
                push_u32(&mut buf, c as u32);
            }
        }
        for &v in self.standardizer.shift() {
            push_f64(&mut buf, v);
        }
        for &v in self.standardizer.scale() {
            push_f64(&mut buf, v);
        }
        for block in &self.blocks {
            for l in 0..block.weights().len() {
                for &v in block.weights()[l].data() {
                    push_f64(&mut buf, v);
                }
                for &v in block.biases()[l].data() {
                    push_f64(&mut buf, v);
                }
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(8)?;
        if magic != MAF_MAGIC {
            return Err(Error::format(None, "not a flow model file (bad magic)"));
        }
        let dim = r.u32()? as usize;
        let n_blocks = r.u32()? as usize;
        let n_hidden = r.u32()? as usize;
        if dim == 0 || n_blocks == 0 || n_hidden == 0 {
            return Err(Error::format(None, "flow model header declares empty architecture"));
        }
        if n_hidden > 1024 || n_blocks > 1024 || dim > 65_536 {
            return Err(Error::format(None, "flow model header is implausibly large"));
        }
        let mut hidden = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            hidden.push(r.u32()? as usize);
        }
        let mut orderings = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let mut ord = Vec::with_capacity(dim);
            for _ in 0..dim {
                ord.push(r.u32()? as usize);
            }
            orderings.push(ord);
        }
        let mut shift = Vec::with_capacity(dim);
        for _ in 0..dim {
            shift.push(r.f64()?);
        }
        let mut scale = Vec::with_capacity(dim);
        for _ in 0..dim {
            scale.push(r.f64()?);
        }
        let standardizer = Standardizer::new(shift, scale)
            .map_err(|e| Error::format(None, format!("bad standardizer: {e}")))?;

        let mut layer_dims = Vec::with_capacity(n_hidden + 2);
        layer_dims.push(dim);
        layer_dims.extend(hidden.iter().copied());
        layer_dims.push(2 * dim);
        let mut blocks = Vec::with_capacity(n_blocks);
        for ordering in &orderings {
            let mut weights = Vec::with_capacity(layer_dims.len() - 1);
            let mut biases = Vec::with_capacity(layer_dims.len() - 1);
            for l in 0..layer_dims.len() - 1 {
                let (fi, fo) = (layer_dims[l], layer_dims[l + 1]);
                let mut w = Matrix::zeros(fi, fo);
                for v in w.data_mut() {
                    *v = r.f64()?;
                }
                let mut b = Matrix::zeros(1, fo);
                for v in b.data_mut() {
                    *v = r.f64()?;
                }
                weights.push(w);
                biases.push(b);
            }
            blocks.push(
                MadeNetwork::from_parts(dim, &hidden, ordering, weights, biases)
                    .map_err(|e| Error::format(None, format!("bad block: {e}")))?,
            );
        }
        r.finish()?;
        Ok(MafModel { dim, blocks, standardizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) const LN_TWO_PI: f64 = 1.837_877_066_409_345_3;

pub(crate) fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(None, "model file truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(None, "trailing bytes after model payload"));
        }
        Ok(())
    }
}
