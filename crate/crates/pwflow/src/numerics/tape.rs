use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

/// Handle to a node on a [`GradTape`]. Only valid for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Recorded operation. Inputs are node indices into the owning tape.
#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Broadcast add of a 1xM row onto an NxM matrix.
    AddRow(usize, usize),
    /// Broadcast multiply of an NxM matrix by a 1xM row.
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Clamp(usize, f64, f64),
    /// Row-wise sum: NxM -> Nx1.
    SumRows(usize),
    /// Full reduction to a 1x1 scalar.
    SumAll(usize),
    /// Row-wise overflow-safe log-sum-exp: NxM -> Nx1.
    LogSumExpRows(usize),
    /// Column window [start, start+len).
    SliceCols(usize, usize, usize),
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Gradients produced by [`GradTape::backward`], one dense matrix per
/// registered parameter, in registration order. Parameters the loss does not
/// depend on get explicit zero matrices.
pub struct GradientMap {
    entries: Vec<(NodeId, Matrix)>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.entries.iter().find(|(nid, _)| *nid == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Matrix)> {
        self.entries.iter().map(|(id, g)| (*id, g))
    }

    pub fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.entries.iter().map(|(_, g)| g)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar gradient entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, g)| g.len()).sum()
    }
}

/// Reverse-mode Wengert tape over matrix-valued nodes.
///
/// Intended use: build one tape per training step, run [`backward`], apply
/// the updates, drop the tape. Values are stored eagerly at recording time so
/// `value()` is always available; `backward` walks the record once in reverse.
///
/// [`backward`]: GradTape::backward
pub struct GradTape {
    nodes: Vec<Node>,
    params: Vec<usize>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.shape() != (1, 1) {
            return Err(Error::shape("scalar", format!("node is {:?}", v.shape())));
        }
        Ok(v.get(0, 0))
    }

    /// Record a non-trainable input.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// Record a trainable parameter; it will receive a gradient entry.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        let id = self.push(Op::Param, value);
        self.params.push(id.0);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.push(Op::Matmul(a.0, b.0), value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a.0, b.0), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a.0, b.0), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a.0, b.0), value))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let value = self.broadcast("add_row", a, row, |x, y| x + y)?;
        Ok(self.push(Op::AddRow(a.0, row.0), value))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let value = self.broadcast("mul_row", a, row, |x, y| x * y)?;
        Ok(self.push(Op::MulRow(a.0, row.0), value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v * c);
        self.push(Op::Scale(a.0, c), value)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v + c);
        self.push(Op::AddScalar(a.0), value)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(f64::exp);
        self.push(Op::Exp(a.0), value)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(f64::ln);
        self.push(Op::Log(a.0), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(f64::tanh);
        self.push(Op::Tanh(a.0), value)
    }

    /// Elementwise clamp. The gradient passes through strictly inside
    /// `[lo, hi]` and is zero outside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v.clamp(lo, hi));
        self.push(Op::Clamp(a.0, lo, hi), value)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let src = &self.nodes[a.0].value;
        let mut value = Matrix::zeros(src.rows(), 1);
        for r in 0..src.rows() {
            value.set(r, 0, src.row(r).iter().sum());
        }
        self.push(Op::SumRows(a.0), value)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.nodes[a.0].value.data().iter().sum();
        let value = Matrix::from_vec(1, 1, vec![total]).expect("1x1");
        self.push(Op::SumAll(a.0), value)
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let src = &self.nodes[a.0].value;
        let mut value = Matrix::zeros(src.rows(), 1);
        for r in 0..src.rows() {
            value.set(r, 0, super::matrix::logsumexp(src.row(r)));
        }
        self.push(Op::LogSumExpRows(a.0), value)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = &self.nodes[a.0].value;
        if start + len > src.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("window {start}..{} of {} columns", start + len, src.cols()),
            ));
        }
        let mut value = Matrix::zeros(src.rows(), len);
        for r in 0..src.rows() {
            value.row_mut(r).copy_from_slice(&src.row(r)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols(a.0, start, len), value))
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient per
    /// registered parameter, in registration order.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let lv = &self.nodes[loss.0].value;
        if lv.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {:?}", lv.shape()),
            ));
        }
        let lval = lv.get(0, 0);
        if !lval.is_finite() {
            return Err(Error::numeric("backward loss", lval));
        }

        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]).expect("1x1"));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let entries = self
            .params
            .iter()
            .map(|&p| {
                let g = grads[p].take().unwrap_or_else(|| {
                    let v = &self.nodes[p].value;
                    Matrix::zeros(v.rows(), v.cols())
                });
                (NodeId(p), g)
            })
            .collect();
        Ok(GradientMap { entries })
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn zip(&self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if x.shape() != y.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&u, &v)| f(u, v)).collect();
        Matrix::from_vec(x.rows(), x.cols(), data)
    }

    fn broadcast(&self, op: &'static str, a: NodeId, row: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (x, r) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::shape(
                op,
                format!("cannot broadcast {:?} over {:?}", r.shape(), x.shape()),
            ));
        }
        let mut out = x.clone();
        let rdata = r.row(0);
        for i in 0..out.rows() {
            for (o, &rv) in out.row_mut(i).iter_mut().zip(rdata) {
                *o = f(*o, rv);
            }
        }
        Ok(out)
    }

    fn accumulate(grads: &mut [Option<Matrix>], target: usize, shape: (usize, usize), add: impl FnOnce(&mut Matrix)) {
        let slot = &mut grads[target];
        if slot.is_none() {
            *slot = Some(Matrix::zeros(shape.0, shape.1));
        }
        add(slot.as_mut().expect("just initialized"));
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[idx];
        match node.op {
            Op::Constant | Op::Param => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                let da = g.matmul_nt(bv)?;
                let db = av.matmul_tn(g)?;
                Self::accumulate(grads, a, av.shape(), |m| {
                    m.add_assign_scaled(&da, 1.0).expect("shape");
                });
                Self::accumulate(grads, b, bv.shape(), |m| {
                    m.add_assign_scaled(&db, 1.0).expect("shape");
                });
            }
            Op::Add(a, b) => {
                let shape = g.shape();
                Self::accumulate(grads, a, shape, |m| {
                    m.add_assign_scaled(g, 1.0).expect("shape");
                });
                Self::accumulate(grads, b, shape, |m| {
                    m.add_assign_scaled(g, 1.0).expect("shape");
                });
            }
            Op::Sub(a, b) => {
                let shape = g.shape();
                Self::accumulate(grads, a, shape, |m| {
                    m.add_assign_scaled(g, 1.0).expect("shape");
                });
                Self::accumulate(grads, b, shape, |m| {
                    m.add_assign_scaled(g, -1.0).expect("shape");
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                Self::accumulate(grads, a, av.shape(), |m| {
                    for ((o, &gv), &b_) in m.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * b_;
                    }
                });
                Self::accumulate(grads, b, bv.shape(), |m| {
                    for ((o, &gv), &a_) in m.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * a_;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let shape = self.nodes[a].value.shape();
                Self::accumulate(grads, a, shape, |m| {
                    m.add_assign_scaled(g, 1.0).expect("shape");
                });
                let cols = shape.1;
                Self::accumulate(grads, row, (1, cols), |m| {
                    let acc = m.row_mut(0);
                    for r in 0..g.rows() {
                        for (o, &gv) in acc.iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::MulRow(a, row) => {
                let av = &self.nodes[a].value;
                let rv = &self.nodes[row].value;
                Self::accumulate(grads, a, av.shape(), |m| {
                    for r in 0..g.rows() {
                        let mrow = &mut m.data_mut()[r * av.cols()..(r + 1) * av.cols()];
                        for ((o, &gv), &rw) in mrow.iter_mut().zip(g.row(r)).zip(rv.row(0)) {
                            *o += gv * rw;
                        }
                    }
                });
                Self::accumulate(grads, row, (1, av.cols()), |m| {
                    let acc = m.row_mut(0);
                    for r in 0..g.rows() {
                        for ((o, &gv), &a_) in acc.iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *o += gv * a_;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                let shape = self.nodes[a].value.shape();
                Self::accumulate(grads, a, shape, |m| {
                    m.add_assign_scaled(g, c).expect("shape");
                });
            }
            Op::AddScalar(a) => {
                let shape = self.nodes[a].value.shape();
                Self::accumulate(grads, a, shape, |m| {
                    m.add_assign_scaled(g, 1.0).expect("shape");
                });
            }
            Op::Exp(a) => {
                let out = &node.value;
                let shape = out.shape();
                Self::accumulate(grads, a, shape, |m| {
                    for ((o, &gv), &ev) in m.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *o += gv * ev;
                    }
                });
            }
            Op::Log(a) => {
                let av = &self.nodes[a].value;
                Self::accumulate(grads, a, av.shape(), |m| {
                    for ((o, &gv), &x) in m.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv / x;
                    }
                });
            }
            Op::Tanh(a) => {
                let out = &node.value;
                Self::accumulate(grads, a, out.shape(), |m| {
                    for ((o, &gv), &t) in m.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *o += gv * (1.0 - t * t);
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = &self.nodes[a].value;
                Self::accumulate(grads, a, av.shape(), |m| {
                    for ((o, &gv), &x) in m.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        if x > lo && x < hi {
                            *o += gv;
                        }
                    }
                });
            }
            Op::SumRows(a) => {
                let av = &self.nodes[a].value;
                let cols = av.cols();
                Self::accumulate(grads, a, av.shape(), |m| {
                    for r in 0..av.rows() {
                        let gv = g.get(r, 0);
                        for o in m.row_mut(r) {
                            *o += gv;
                        }
                    }
                });
                let _ = cols;
            }
            Op::SumAll(a) => {
                let av = &self.nodes[a].value;
                let gv = g.get(0, 0);
                Self::accumulate(grads, a, av.shape(), |m| {
                    for o in m.data_mut() {
                        *o += gv;
                    }
                });
            }
            Op::LogSumExpRows(a) => {
                let av = &self.nodes[a].value;
                let out = &node.value;
                Self::accumulate(grads, a, av.shape(), |m| {
                    for r in 0..av.rows() {
                        let gv = g.get(r, 0);
                        let lse = out.get(r, 0);
                        let mrow = &mut m.data_mut()[r * av.cols()..(r + 1) * av.cols()];
                        for (o, &x) in mrow.iter_mut().zip(av.row(r)) {
                            *o += gv * (x - lse).exp();
                        }
                    }
                });
            }
            Op::SliceCols(a, start, len) => {
                let av = &self.nodes[a].value;
                let cols = av.cols();
                Self::accumulate(grads, a, av.shape(), |m| {
                    for r in 0..g.rows() {
                        let mrow = &mut m.data_mut()[r * cols + start..r * cols + start + len];
                        for (o, &gv) in mrow.iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}
