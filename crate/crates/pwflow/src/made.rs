use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{GradTape, Matrix, NodeId};

/// Bound applied to predicted log-scales before exponentiation. Keeps a
/// single bad step from collapsing or exploding a coordinate's scale.
pub const LOG_SIGMA_BOUND: f64 = 7.0;

/// Shift and scale parameters produced for one input point.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalParams {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
}

/// Identity autoregressive ordering `[0, 1, .., d-1]`.
pub fn identity_ordering(dim: usize) -> Vec<usize> {
    (0..dim).collect()
}

/// Reversed autoregressive ordering `[d-1, .., 1, 0]`.
pub fn reversed_ordering(dim: usize) -> Vec<usize> {
    (0..dim).rev().collect()
}

/// Parameter count of a network with this shape, without building one.
/// Matches [`MadeNetwork::parameter_count`] exactly (masked entries count).
pub fn network_parameter_count(dim: usize, hidden_sizes: &[usize]) -> usize {
    let mut dims = Vec::with_capacity(hidden_sizes.len() + 2);
    dims.push(dim);
    dims.extend_from_slice(hidden_sizes);
    dims.push(2 * dim);
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Masked autoencoder producing per-dimension `(mu_i, log_sigma_i)` that
/// depend only on inputs strictly earlier in the autoregressive ordering.
///
/// Masks use sequential degrees: the input at ordering position `p` has
/// degree `p`, hidden unit `u` has degree `1 + (u mod (d-1))` (all ones when
/// `d == 1`), and the output block for position `p` connects only to hidden
/// units of strictly smaller degree. The first position therefore receives
/// constant `(mu, log_sigma)`.
///
/// Weights are stored unmasked; the mask is applied at every use, so masked
/// entries are inert no matter what a file or an optimizer writes into them.
#[derive(Clone, Debug)]
pub struct MadeNetwork {
    dim: usize,
    hidden_sizes: Vec<usize>,
    /// `ordering[p]` is the coordinate placed at autoregressive position p.
    ordering: Vec<usize>,
    /// 1-based position of each coordinate; inverse of `ordering`.
    positions: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
    masks: Vec<Matrix>,
}

impl MadeNetwork {
    /// Builds a network with randomly initialized hidden layers (normal with
    /// std `1/sqrt(fan_in)`) and a zero-initialized output layer, so a fresh
    /// network predicts `mu = 0`, `log_sigma = 0`.
    pub fn new(dim: usize, hidden_sizes: &[usize], ordering: &[usize], seed: u64) -> Result<Self> {
        let layout = Layout::build(dim, hidden_sizes, ordering)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layout.layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layout.layer_dims.len() - 1);
        let last = layout.layer_dims.len() - 2;
        for l in 0..layout.layer_dims.len() - 1 {
            let (fan_in, fan_out) = (layout.layer_dims[l], layout.layer_dims[l + 1]);
            let mut w = Matrix::zeros(fan_in, fan_out);
            if l != last {
                let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt())
                    .map_err(|e| Error::config(format!("init distribution: {e}")))?;
                let mask = &layout.masks[l];
                for r in 0..fan_in {
                    for c in 0..fan_out {
                        let draw: f64 = normal.sample(&mut rng);
                        if mask.get(r, c) != 0.0 {
                            w.set(r, c, draw);
                        }
                    }
                }
            }
            weights.push(w);
            biases.push(Matrix::zeros(1, fan_out));
        }
        Ok(MadeNetwork {
            dim,
            hidden_sizes: hidden_sizes.to_vec(),
            ordering: ordering.to_vec(),
            positions: layout.positions,
            weights,
            biases,
            masks: layout.masks,
        })
    }

    /// Rebuilds a network from stored parameters (deserialization path).
    pub fn from_parts(
        dim: usize,
        hidden_sizes: &[usize],
        ordering: &[usize],
        weights: Vec<Matrix>,
        biases: Vec<Matrix>,
    ) -> Result<Self> {
        let layout = Layout::build(dim, hidden_sizes, ordering)?;
        let n_layers = layout.layer_dims.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(Error::shape(
                "MadeNetwork::from_parts",
                format!("expected {n_layers} layers, got {} weights / {} biases", weights.len(), biases.len()),
            ));
        }
        for l in 0..n_layers {
            let want = (layout.layer_dims[l], layout.layer_dims[l + 1]);
            if weights[l].shape() != want {
                return Err(Error::shape(
                    "MadeNetwork::from_parts",
                    format!("layer {l} weights are {:?}, expected {want:?}", weights[l].shape()),
                ));
            }
            if biases[l].shape() != (1, want.1) {
                return Err(Error::shape(
                    "MadeNetwork::from_parts",
                    format!("layer {l} bias is {:?}, expected (1, {})", biases[l].shape(), want.1),
                ));
            }
        }
        Ok(MadeNetwork {
            dim,
            hidden_sizes: hidden_sizes.to_vec(),
            ordering: ordering.to_vec(),
            positions: layout.positions,
            weights,
            biases,
            masks: layout.masks,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.hidden_sizes
    }

    pub fn ordering(&self) -> &[usize] {
        &self.ordering
    }

    /// 1-based autoregressive position of coordinate `coord`.
    pub fn position(&self, coord: usize) -> usize {
        self.positions[coord]
    }

    /// Total number of trainable scalars (all weight and bias entries,
    /// masked positions included).
    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(Matrix::len).sum::<usize>()
            + self.biases.iter().map(Matrix::len).sum::<usize>()
    }

    /// Parameters in a fixed order: weight then bias per layer.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(self.weights.len() * 2);
        for l in 0..self.weights.len() {
            out.push(&self.weights[l]);
            out.push(&self.biases[l]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::with_capacity(self.weights.len() * 2);
        let mut ws = self.weights.iter_mut();
        let mut bs = self.biases.iter_mut();
        loop {
            match (ws.next(), bs.next()) {
                (Some(w), Some(b)) => {
                    out.push(w);
                    out.push(b);
                }
                _ => break,
            }
        }
        out
    }

    /// `(mu, log_sigma)` for a batch of rows. Plain evaluation path used for
    /// density computation, inversion and test losses; no tape involved.
    pub fn conditionals_batch(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        if x.cols() != self.dim {
            return Err(Error::shape(
                "conditionals_batch",
                format!("input has {} columns, network dim is {}", x.cols(), self.dim),
            ));
        }
        if !x.all_finite() {
            let bad = x.data().iter().copied().find(|v| !v.is_finite()).expect("non-finite present");
            return Err(Error::numeric("conditionals input", bad));
        }
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let wm = self.masked_weight(l);
            let mut next = h.matmul(&wm)?;
            let b = self.biases[l].row(0);
            for r in 0..next.rows() {
                for (v, &bv) in next.row_mut(r).iter_mut().zip(b) {
                    *v += bv;
                }
            }
            if l != last {
                for v in next.data_mut() {
                    *v = v.tanh();
                }
            }
            h = next;
        }
        let n = h.rows();
        let mut mu = Matrix::zeros(n, self.dim);
        let mut ls = Matrix::zeros(n, self.dim);
        for r in 0..n {
            let row = h.row(r);
            mu.row_mut(r).copy_from_slice(&row[..self.dim]);
            for (c, v) in row[self.dim..].iter().enumerate() {
                ls.set(r, c, v.clamp(-LOG_SIGMA_BOUND, LOG_SIGMA_BOUND));
            }
        }
        Ok((mu, ls))
    }

    /// `(mu, log_sigma)` for a single point.
    pub fn conditionals(&self, x: &[f64]) -> Result<ConditionalParams> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        let (mu, ls) = self.conditionals_batch(&m)?;
        Ok(ConditionalParams { mu: mu.row(0).to_vec(), log_sigma: ls.row(0).to_vec() })
    }

    /// Tape-recorded version of [`conditionals_batch`]: registers this
    /// network's parameters on `tape` (appending their ids to `param_ids` in
    /// the same order as [`params`]) and returns `(mu, log_sigma)` nodes.
    ///
    /// [`conditionals_batch`]: MadeNetwork::conditionals_batch
    /// [`params`]: MadeNetwork::params
    pub fn conditionals_taped(
        &self,
        tape: &mut GradTape,
        x: NodeId,
        param_ids: &mut Vec<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            let w = tape.param(self.weights[l].clone());
            let b = tape.param(self.biases[l].clone());
            param_ids.push(w);
            param_ids.push(b);
            let mask = tape.constant(self.masks[l].clone());
            let wm = tape.mul(w, mask)?;
            let lin = tape.matmul(h, wm)?;
            let aff = tape.add_row(lin, b)?;
            h = if l != last { tape.tanh(aff) } else { aff };
        }
        let mu = tape.slice_cols(h, 0, self.dim)?;
        let raw = tape.slice_cols(h, self.dim, self.dim)?;
        let ls = tape.clamp(raw, -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND);
        Ok((mu, ls))
    }

    pub(crate) fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub(crate) fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    fn masked_weight(&self, l: usize) -> Matrix {
        let mut wm = self.weights[l].clone();
        for (v, &m) in wm.data_mut().iter_mut().zip(self.masks[l].data()) {
            *v *= m;
        }
        wm
    }
}

/// Degree bookkeeping shared by the constructor and `from_parts`.
struct Layout {
    layer_dims: Vec<usize>,
    positions: Vec<usize>,
    masks: Vec<Matrix>,
}

impl Layout {
    fn build(dim: usize, hidden_sizes: &[usize], ordering: &[usize]) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("network dimension must be at least 1"));
        }
        if hidden_sizes.is_empty() {
            return Err(Error::config("at least one hidden layer is required"));
        }
        if let Some(&z) = hidden_sizes.iter().find(|&&h| h == 0) {
            return Err(Error::config(format!("hidden layer width must be positive, got {z}")));
        }
        if ordering.len() != dim {
            return Err(Error::config(format!(
                "ordering has {} entries for dimension {dim}",
                ordering.len()
            )));
        }
        let mut positions = vec![0usize; dim];
        for (p, &coord) in ordering.iter().enumerate() {
            if coord >= dim || positions[coord] != 0 {
                return Err(Error::config(format!(
                    "ordering must be a permutation of 0..{dim}"
                )));
            }
            positions[coord] = p + 1;
        }

        let mut layer_dims = Vec::with_capacity(hidden_sizes.len() + 2);
        layer_dims.push(dim);
        layer_dims.extend_from_slice(hidden_sizes);
        layer_dims.push(2 * dim);

        // Degrees: inputs carry their 1-based position, hidden units cycle
        // through 1..dim, outputs carry the position of their coordinate.
        let input_degrees: Vec<usize> = positions.clone();
        let hidden_degrees: Vec<Vec<usize>> = hidden_sizes
            .iter()
            .map(|&w| {
                (0..w)
                    .map(|u| if dim > 1 { 1 + (u % (dim - 1)) } else { 1 })
                    .collect()
            })
            .collect();

        let mut masks = Vec::with_capacity(hidden_sizes.len() + 1);
        let mut prev: &[usize] = &input_degrees;
        for next in &hidden_degrees {
            let mut m = Matrix::zeros(prev.len(), next.len());
            for (r, &dp) in prev.iter().enumerate() {
                for (c, &dn) in next.iter().enumerate() {
                    if dn >= dp {
                        m.set(r, c, 1.0);
                    }
                }
            }
            masks.push(m);
            prev = next;
        }
        // Output layer: strict inequality, covering the mu block and the
        // log-sigma block with the same pattern.
        let last_hidden = hidden_degrees.last().expect("at least one hidden layer");
        let mut m = Matrix::zeros(last_hidden.len(), 2 * dim);
        for (r, &dh) in last_hidden.iter().enumerate() {
            for coord in 0..dim {
                if positions[coord] > dh {
                    m.set(r, coord, 1.0);
                    m.set(r, dim + coord, 1.0);
                }
            }
        }
        masks.push(m);

        Ok(Layout { layer_dims, positions, masks })
    }
}
