use std::collections::BTreeMap;

use super::{GradError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    RowSum(NodeId),
    ColSum(NodeId),
    DivRows(NodeId, NodeId),
    DivCols(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    SoftmaxRows(NodeId),
    LogNormalizeRows(NodeId),
    LogNormalizeCols(NodeId),
    LeakyRelu(NodeId, f64),
    MaxPool { input: NodeId, argmax: Vec<usize> },
    Gather { input: NodeId, indices: Vec<usize> },
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::RowSum(..) => "row_sum",
            Op::ColSum(..) => "col_sum",
            Op::DivRows(..) => "div_rows",
            Op::DivCols(..) => "div_cols",
            Op::AddRow(..) => "add_row",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogNormalizeRows(..) => "log_normalize_rows",
            Op::LogNormalizeCols(..) => "log_normalize_cols",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::MaxPool { .. } => "max_pool",
            Op::Gather { .. } => "gather",
            Op::ConcatCols(..) => "concat_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
    needs_grad: bool,
    // softmax of the input, kept for the log-normalize backward passes
    saved: Option<Tensor>,
}

/// Reverse-mode recording of a computation.
///
/// Values are computed eagerly as operations are appended, so node ids are
/// always in topological order. A tape is built for one forward pass and
/// then discarded.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of trainable leaves, keyed by node id.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> GradError {
    GradError::Shape { op, detail: format!("{:?} vs {:?}", a.shape(), b.shape()) }
}

fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    // a: m×k, b: n×k -> m×n
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &bd[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::matrix(m, n, out).expect("matmul_nt shape")
}

fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    // a: k×m, b: k×n -> m×n
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let br = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let x = ad[p * m + i];
            if x == 0.0 {
                continue;
            }
            let or = &mut out[i * n..(i + 1) * n];
            for (o, y) in or.iter_mut().zip(br) {
                *o += x * y;
            }
        }
    }
    Tensor::matrix(m, n, out).expect("matmul_tn shape")
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(value, Op::Leaf, false, false, None)
    }

    /// Trainable leaf; `backward` reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push_raw(value, Op::Leaf, true, true, None)
    }

    fn push_raw(
        &mut self,
        value: Tensor,
        op: Op,
        trainable: bool,
        needs_grad: bool,
        saved: Option<Tensor>,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op, trainable, needs_grad, saved });
        id
    }

    fn check(&self, id: NodeId) -> Result<&Tensor, GradError> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(GradError::UnknownNode(id.0))
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[NodeId], saved: Option<Tensor>) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.push_raw(value, op, false, needs_grad, saved)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), GradError> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.record(v, Op::Add(a, b), &[a, b], None))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.record(v, Op::Sub(a, b), &[a, b], None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.record(v, Op::Mul(a, b), &[a, b], None))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.same_shape("div", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        Ok(self.record(v, Op::Div(a, b), &[a, b], None))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, GradError> {
        let v = self.check(a)?.map(|x| x * c);
        Ok(self.record(v, Op::Scale(a, c), &[a], None))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let v = self.check(a)?.map(f64::exp);
        Ok(self.record(v, Op::Exp(a), &[a], None))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let v = self.check(a)?.map(f64::ln);
        Ok(self.record(v, Op::Log(a), &[a], None))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let v = self.check(a)?.matmul(self.check(b)?)?;
        Ok(self.record(v, Op::MatMul(a, b), &[a, b], None))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let v = self.check(a)?.transpose();
        Ok(self.record(v, Op::Transpose(a), &[a], None))
    }

    /// N×M → N×1.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let t = self.check(a)?;
        let sums = t.row_sums();
        let v = Tensor::matrix(t.rows(), 1, sums)?;
        Ok(self.record(v, Op::RowSum(a), &[a], None))
    }

    /// N×M → 1×M.
    pub fn col_sum(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let t = self.check(a)?;
        let sums = t.col_sums();
        let v = Tensor::matrix(1, t.cols(), sums)?;
        Ok(self.record(v, Op::ColSum(a), &[a], None))
    }

    /// Divides row `i` of `a` by `r[i]`, where `r` is N×1.
    pub fn div_rows(&mut self, a: NodeId, r: NodeId) -> Result<NodeId, GradError> {
        let (ta, tr) = (self.check(a)?, self.check(r)?);
        if tr.rows() != ta.rows() || tr.cols() != 1 {
            return Err(shape_err("div_rows", ta, tr));
        }
        let v = Tensor::from_fn(ta.rows(), ta.cols(), |i, j| ta.get(i, j) / tr.get(i, 0));
        Ok(self.record(v, Op::DivRows(a, r), &[a, r], None))
    }

    /// Divides column `j` of `a` by `c[j]`, where `c` is 1×M.
    pub fn div_cols(&mut self, a: NodeId, c: NodeId) -> Result<NodeId, GradError> {
        let (ta, tc) = (self.check(a)?, self.check(c)?);
        if tc.cols() != ta.cols() || tc.rows() != 1 {
            return Err(shape_err("div_cols", ta, tc));
        }
        let v = Tensor::from_fn(ta.rows(), ta.cols(), |i, j| ta.get(i, j) / tc.get(0, j));
        Ok(self.record(v, Op::DivCols(a, c), &[a, c], None))
    }

    /// Adds the 1×M row `b` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if tb.cols() != ta.cols() || tb.rows() != 1 {
            return Err(shape_err("add_row", ta, tb));
        }
        let v = Tensor::from_fn(ta.rows(), ta.cols(), |i, j| ta.get(i, j) + tb.get(0, j));
        Ok(self.record(v, Op::AddRow(a, b), &[a, b], None))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let t = self.check(a)?;
        let mut v = t.clone();
        let c = t.cols();
        for row in v.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        Ok(self.record(v, Op::SoftmaxRows(a), &[a], None))
    }

    /// `a_ij − log Σ_k exp(a_ik)`: row normalization in the log domain.
    pub fn log_normalize_rows(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let t = self.check(a)?;
        let c = t.cols();
        let mut v = t.clone();
        for row in v.data_mut().chunks_mut(c) {
            let l = logsumexp(row.iter().copied());
            for x in row.iter_mut() {
                *x -= l;
            }
        }
        let saved = v.map(f64::exp);
        Ok(self.record(v, Op::LogNormalizeRows(a), &[a], Some(saved)))
    }

    /// `a_ij − log Σ_k exp(a_kj)`: column normalization in the log domain.
    pub fn log_normalize_cols(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let t = self.check(a)?;
        let (r, c) = (t.rows(), t.cols());
        let mut v = t.clone();
        for j in 0..c {
            let l = logsumexp((0..r).map(|i| t.get(i, j)));
            for i in 0..r {
                let x = v.get(i, j);
                v.set(i, j, x - l);
            }
        }
        let saved = v.map(f64::exp);
        Ok(self.record(v, Op::LogNormalizeCols(a), &[a], Some(saved)))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId, GradError> {
        let v = self.check(a)?.map(|x| if x > 0.0 { x } else { slope * x });
        Ok(self.record(v, Op::LeakyRelu(a, slope), &[a], None))
    }

    /// Column-wise max over consecutive groups of `group` rows:
    /// (N·group)×C → N×C. Ties go to the lowest row.
    pub fn max_pool_groups(&mut self, a: NodeId, group: usize) -> Result<NodeId, GradError> {
        let t = self.check(a)?;
        if group == 0 || t.rows() % group != 0 {
            return Err(GradError::Shape {
                op: "max_pool",
                detail: format!("{} rows not divisible into groups of {}", t.rows(), group),
            });
        }
        let (n, c) = (t.rows() / group, t.cols());
        let mut out = vec![0.0; n * c];
        let mut argmax = vec![0usize; n * c];
        for g in 0..n {
            for j in 0..c {
                let mut best = g * group;
                let mut bv = t.get(best, j);
                for r in g * group + 1..(g + 1) * group {
                    let x = t.get(r, j);
                    if x > bv {
                        bv = x;
                        best = r;
                    }
                }
                out[g * c + j] = bv;
                argmax[g * c + j] = best * c + j;
            }
        }
        let v = Tensor::matrix(n, c, out)?;
        Ok(self.record(v, Op::MaxPool { input: a, argmax }, &[a], None))
    }

    /// Selects rows of `a` by index (repeats allowed).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, GradError> {
        let t = self.check(a)?;
        let c = t.cols();
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.rows()) {
            return Err(GradError::Shape {
                op: "gather",
                detail: format!("row index {bad} out of range for {} rows", t.rows()),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::matrix(indices.len(), c, out)?;
        Ok(self.record(v, Op::Gather { input: a, indices: indices.to_vec() }, &[a], None))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, GradError> {
        let first = *parts.first().ok_or(GradError::Shape {
            op: "concat_cols",
            detail: "no inputs".into(),
        })?;
        let rows = self.check(first)?.rows();
        let mut total = 0;
        for &p in parts {
            let t = self.check(p)?;
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(first), t));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let v = Tensor::matrix(rows, total, out)?;
        Ok(self.record(v, Op::ConcatCols(parts.to_vec()), parts, None))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let v = Tensor::scalar(self.check(a)?.sum());
        Ok(self.record(v, Op::Sum(a), &[a], None))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let t = self.check(a)?;
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        Ok(self.record(v, Op::Mean(a), &[a], None))
    }

    /// Gradient of a scalar node with respect to every trainable leaf.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, GradError> {
        let t = self.check(loss)?;
        if !t.is_scalar() {
            return Err(GradError::NotScalar(t.shape().to_vec()));
        }
        let seed = Tensor::filled(t.shape(), 1.0);
        self.backward_from(loss, seed)
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `node`) back
    /// to the trainable leaves. This is the entry point for gradients that
    /// enter the graph somewhere other than a scalar loss.
    pub fn backward_from(&self, node: NodeId, seed: Tensor) -> Result<Gradients, GradError> {
        let t = self.check(node)?;
        if t.shape() != seed.shape() && !(t.len() == seed.len() && t.is_scalar()) {
            return Err(shape_err("backward seed", t, &seed));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; node.0 + 1];
        adj[node.0] = Some(seed);
        let mut out = Gradients::default();

        for idx in (0..=node.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let n = &self.nodes[idx];
            if !n.needs_grad {
                continue;
            }
            self.propagate(idx, g, &mut adj, &mut out);
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: Tensor, adj: &mut [Option<Tensor>], out: &mut Gradients) {
        let node = &self.nodes[idx];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut acc = |id: NodeId, t: Tensor| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut adj[id.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {
                if node.trainable {
                    out.grads.insert(NodeId(idx), g);
                }
            }
            Op::Add(a, b) => {
                acc(*b, g.clone());
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.map(|x| -x));
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |x, y| x * y));
                acc(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, g.zip_map(tb, |x, y| x / y));
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(ta.data().iter().zip(tb.data()))
                    .map(|(&gv, (&x, &y))| -gv * x / (y * y))
                    .collect();
                acc(*b, Tensor::new(tb.shape().to_vec(), gb).expect("div grad"));
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |x, y| x / y)),
            Op::MatMul(a, b) => {
                // C = A·B: dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, matmul_nt(&g, val(*b)));
                acc(*b, matmul_tn(val(*a), &g));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::RowSum(a) => {
                let t = val(*a);
                acc(*a, Tensor::from_fn(t.rows(), t.cols(), |i, _| g.get(i, 0)));
            }
            Op::ColSum(a) => {
                let t = val(*a);
                acc(*a, Tensor::from_fn(t.rows(), t.cols(), |_, j| g.get(0, j)));
            }
            Op::DivRows(a, r) => {
                let (ta, tr) = (val(*a), val(*r));
                let ga = Tensor::from_fn(ta.rows(), ta.cols(), |i, j| g.get(i, j) / tr.get(i, 0));
                let gr = Tensor::from_fn(tr.rows(), 1, |i, _| {
                    let ri = tr.get(i, 0);
                    -(0..ta.cols()).map(|j| g.get(i, j) * ta.get(i, j)).sum::<f64>() / (ri * ri)
                });
                acc(*a, ga);
                acc(*r, gr);
            }
            Op::DivCols(a, c) => {
                let (ta, tc) = (val(*a), val(*c));
                let ga = Tensor::from_fn(ta.rows(), ta.cols(), |i, j| g.get(i, j) / tc.get(0, j));
                let gc = Tensor::from_fn(1, tc.cols(), |_, j| {
                    let cj = tc.get(0, j);
                    -(0..ta.rows()).map(|i| g.get(i, j) * ta.get(i, j)).sum::<f64>() / (cj * cj)
                });
                acc(*a, ga);
                acc(*c, gc);
            }
            Op::AddRow(a, b) => {
                let gb = Tensor::matrix(1, g.cols(), g.col_sums()).expect("add_row grad");
                acc(*b, gb);
                acc(*a, g);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut ga = g.clone();
                for i in 0..y.rows() {
                    let dot: f64 = (0..c).map(|j| g.get(i, j) * y.get(i, j)).sum();
                    for j in 0..c {
                        ga.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                acc(*a, ga);
            }
            Op::LogNormalizeRows(a) => {
                let s = node.saved.as_ref().expect("saved softmax");
                let gsum = g.row_sums();
                let ga = Tensor::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) - s.get(i, j) * gsum[i]);
                acc(*a, ga);
            }
            Op::LogNormalizeCols(a) => {
                let s = node.saved.as_ref().expect("saved softmax");
                let gsum = g.col_sums();
                let ga = Tensor::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) - s.get(i, j) * gsum[j]);
                acc(*a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                acc(*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { slope * gv }));
            }
            Op::MaxPool { input, argmax } => {
                let mut ga = Tensor::zeros(val(*input).shape());
                let d = ga.data_mut();
                for (k, &src) in argmax.iter().enumerate() {
                    d[src] += g.data()[k];
                }
                acc(*input, ga);
            }
            Op::Gather { input, indices } => {
                let t = val(*input);
                let c = t.cols();
                let mut ga = Tensor::zeros(t.shape());
                let d = ga.data_mut();
                for (r, &src) in indices.iter().enumerate() {
                    for (dst, gv) in d[src * c..(src + 1) * c].iter_mut().zip(g.row(r)) {
                        *dst += gv;
                    }
                }
                acc(*input, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).cols();
                    let gp = Tensor::from_fn(g.rows(), pc, |i, j| g.get(i, offset + j));
                    offset += pc;
                    acc(p, gp);
                }
            }
            Op::Sum(a) => acc(*a, Tensor::filled(val(*a).shape(), g.item())),
            Op::Mean(a) => {
                let t = val(*a);
                acc(*a, Tensor::filled(t.shape(), g.item() / t.len() as f64));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_ones() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::filled(&[2, 2], 1.0));
        let b = t.constant(Tensor::filled(&[2, 2], 1.0));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c), &Tensor::filled(&[2, 2], 2.0));
    }

    #[test]
    fn identity_matmul() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(3));
        let a_val = Tensor::from_fn(3, 3, |i, j| (i as f64) - 2.0 * j as f64 + 0.25);
        let a = t.constant(a_val.clone());
        let c = t.matmul(i, a).unwrap();
        assert_eq!(t.value(c), &a_val);
    }

    #[test]
    fn exp_of_zero() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[3, 2]));
        let e = t.exp(z).unwrap();
        assert_eq!(t.value(e), &Tensor::filled(&[3, 2], 1.0));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 2]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.add(a, b), Err(GradError::Shape { .. })));
        assert!(matches!(t.matmul(b, a), Err(GradError::Shape { .. })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.param(Tensor::matrix(1, 3, vec![0.3, -1.0, 2.0]).unwrap());
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(2.0));
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2, 2]));
        let y = t.exp(x).unwrap();
        assert!(matches!(t.backward(y), Err(GradError::NotScalar(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::scalar(1.5));
        let c = t.constant(Tensor::scalar(3.0));
        let y = t.mul(x, c).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().item(), 3.0);
    }

    #[test]
    fn max_pool_ties_route_to_lowest_row() {
        let mut t = Tape::new();
        let x = t.param(Tensor::matrix(3, 1, vec![1.0, 1.0, 0.5]).unwrap());
        let p = t.max_pool_groups(x, 3).unwrap();
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut t = Tape::new();
        let x = t.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g_rows = t.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(t.value(g_rows).data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let s = t.sum(g_rows).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
    }
}
