//! Tape of primitive matrix operations with a reverse sweep.
//!
//! Every operation appends a node holding its forward value. Nodes that do
//! not depend on a trainable leaf are marked constant and skipped by
//! [`Graph::backward`].

use std::sync::atomic::{AtomicU32, Ordering};

use serde::{Deserialize, Serialize};

use super::tensor::{dot, l2_norm, Tensor};
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU32 = AtomicU32::new(1);

/// Leaky-ReLU negative slope used by every network in the crate.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Forward values are rounded to `f32` after every operation.
    F32,
}

/// Handle to a node of one particular [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Concat(Vec<Var>),
    Sum(Var),
    Mean(Var),
    RowNorm(Var),
    GroupMean(Var, usize),
    BroadcastRows(Var),
    RowCosine(Var, Var),
    PairwiseCosine(Var),
    SoftmaxCe {
        logits: Var,
        probs: Tensor,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    id: u32,
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, mut value: Tensor, needs_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            round_f32(&mut value);
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        self.var(self.nodes.len() - 1)
    }

    fn var(&self, idx: usize) -> Var {
        Var {
            graph: self.id,
            idx: idx as u32,
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.graph != self.id {
            return Err(Error::GraphMismatch);
        }
        self.nodes.get(v.index()).ok_or(Error::GraphMismatch)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).expect("var from another graph").value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.index()].needs_grad)
    }

    fn push(&mut self, name: &str, mut value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.precision == Precision::F32 {
            round_f32(&mut value);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        let needs_grad = self.needs(inputs);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(self.var(self.nodes.len() - 1))
    }

    fn same_shape(&self, ctx: &str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (&self.node(a)?.value, &self.node(b)?.value);
        if !x.same_shape(y) {
            return Err(Error::dim(
                ctx,
                format!("{}x{}", x.rows(), x.cols()),
                format!("{}x{}", y.rows(), y.cols()),
            ));
        }
        Ok(())
    }

    /// `op(a) · op(b)`, where `ta`/`tb` transpose the operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = self.node(a)?.value.matmul_t(ta, &self.node(b)?.value, tb)?;
        self.push("matmul", value, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `x + bias` with a `1 x m` bias broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (&self.node(x)?.value, &self.node(bias)?.value);
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::dim(
                "add_bias",
                format!("1x{}", xv.cols()),
                format!("{}x{}", bv.rows(), bv.cols()),
            ));
        }
        let mut out = xv.clone();
        let b = bv.data().to_vec();
        for r in 0..out.rows() {
            for (o, bb) in out.row_slice_mut(r).iter_mut().zip(&b) {
                *o += bb;
            }
        }
        self.push("add_bias", out, Op::AddBias { x, bias }, &[x, bias])
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// Elementwise product with a tensor that is not differentiated.
    pub fn mul_const(&mut self, a: Var, k: Tensor) -> Result<Var> {
        let av = &self.node(a)?.value;
        if !av.same_shape(&k) {
            return Err(Error::dim(
                "mul_const",
                format!("{}x{}", av.rows(), av.cols()),
                format!("{}x{}", k.rows(), k.cols()),
            ));
        }
        let v = av.zip_map(&k, |x, y| x * y);
        self.push("mul_const", v, Op::MulConst(a, k), &[a])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.node(a)?.value.map(|x| x * k);
        self.push("scale", v, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.node(a)?.value.map(|x| x + k);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let v = self
            .node(a)?
            .value
            .map(|x| if x > 0.0 { x } else { slope * x });
        self.push("leaky_relu", v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(f64::tanh);
        self.push("tanh", v, Op::Tanh(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(f64::abs);
        self.push("abs", v, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.node(a)?.value.map(|x| x * x);
        self.push("square", v, Op::Square(a), &[a])
    }

    /// Elementwise `(a - b)^2`.
    pub fn squared_difference(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        self.square(d)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors = parts
            .iter()
            .map(|&p| self.node(p).map(|n| &n.value))
            .collect::<Result<Vec<_>>>()?;
        let v = Tensor::concat_cols(&tensors)?;
        self.push("concat", v, Op::Concat(parts.to_vec()), parts)
    }

    /// Sum of all entries, as `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean of all entries, as `1 x 1`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        let m = t.sum() / t.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Sum of absolute values, as `1 x 1`.
    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        let b = self.abs(a)?;
        self.sum(b)
    }

    /// Euclidean norm of each row, `n x 1`.
    pub fn row_l2_norm(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        let norms: Vec<f64> = (0..t.rows()).map(|r| l2_norm(t.row_slice(r))).collect();
        let v = Tensor::matrix(t.rows(), 1, norms)?;
        self.push("row_l2_norm", v, Op::RowNorm(a), &[a])
    }

    /// Means of consecutive row blocks of size `group`; `(k*group) x m -> k x m`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let t = &self.node(a)?.value;
        if group == 0 || t.rows() % group != 0 {
            return Err(Error::dim(
                "group_mean_rows",
                format!("multiple of {group}"),
                t.rows(),
            ));
        }
        let k = t.rows() / group;
        let c = t.cols();
        let mut out = vec![0.0; k * c];
        for r in 0..t.rows() {
            let o = &mut out[(r / group) * c..(r / group + 1) * c];
            for (x, y) in o.iter_mut().zip(t.row_slice(r)) {
                *x += y;
            }
        }
        for x in &mut out {
            *x /= group as f64;
        }
        let v = Tensor::matrix(k, c, out)?;
        self.push("group_mean_rows", v, Op::GroupMean(a, group), &[a])
    }

    /// Repeat a `1 x m` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = &self.node(a)?.value;
        if t.rows() != 1 || n == 0 {
            return Err(Error::dim("broadcast_rows", "1 row", t.rows()));
        }
        let mut data = Vec::with_capacity(n * t.cols());
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let v = Tensor::matrix(n, t.cols(), data)?;
        self.push("broadcast_rows", v, Op::BroadcastRows(a), &[a])
    }

    /// Cosine similarity of matching rows, `n x 1`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_cosine", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let (xr, yr) = (x.row_slice(r), y.row_slice(r));
            let (nx, ny) = (l2_norm(xr), l2_norm(yr));
            if nx == 0.0 || ny == 0.0 {
                return Err(Error::ZeroNorm(format!("row_cosine row {r}")));
            }
            out.push(dot(xr, yr) / (nx * ny));
        }
        let v = Tensor::matrix(x.rows(), 1, out)?;
        self.push("row_cosine", v, Op::RowCosine(a, b), &[a, b])
    }

    /// `n x n` cosine similarities between all row pairs of `a`.
    pub fn pairwise_cosine(&mut self, a: Var) -> Result<Var> {
        let x = &self.node(a)?.value;
        let u = unit_rows(x, "pairwise_cosine")?;
        let v = u.matmul_t(false, &u, true)?;
        self.push("pairwise_cosine", v, Op::PairwiseCosine(a), &[a])
    }

    /// Mean softmax cross-entropy of `logits` (n x K) against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = &self.node(logits)?.value;
        if labels.len() != x.rows() {
            return Err(Error::dim(
                "softmax_cross_entropy labels",
                x.rows(),
                labels.len(),
            ));
        }
        let k = x.cols();
        let mut probs = Tensor::zeros(x.rows(), k);
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(Error::dim(
                    "softmax_cross_entropy label",
                    format!("< {k}"),
                    label,
                ));
            }
            let row = x.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            loss += log_z - row[label];
            for (p, v) in probs.row_slice_mut(r).iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let v = Tensor::scalar(loss / labels.len() as f64);
        self.push(
            "softmax_cross_entropy",
            v,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self.node(root)?;
        let (r, c) = (root_node.value.rows(), root_node.value.cols());
        if r != 1 || c != 1 {
            return Err(Error::NonScalarSeed { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.index()] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.index()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.index()].needs_grad {
                return;
            }
            match &mut grads[v.index()] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.index()].value;
        let needs = |v: Var| self.nodes[v.index()].needs_grad;

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                if needs(a) {
                    // d op(a) = G · op(b)^T
                    let d = if ta {
                        val(b).matmul_t(tb, g, true)?
                    } else {
                        g.matmul_t(false, val(b), !tb)?
                    };
                    acc(a, d);
                }
                if needs(b) {
                    // d op(b) = op(a)^T · G
                    let d = if tb {
                        g.matmul_t(true, val(a), ta)?
                    } else {
                        val(a).matmul_t(!ta, g, false)?
                    };
                    acc(b, d);
                }
            }
            &Op::AddBias { x, bias } => {
                acc(x, g.clone());
                if needs(bias) {
                    acc(bias, column_sums(g));
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                acc(a, g.zip_map(val(b), |x, y| x * y));
                acc(b, g.zip_map(val(a), |x, y| x * y));
            }
            Op::MulConst(a, k) => acc(*a, g.zip_map(k, |x, y| x * y)),
            &Op::Scale(a, k) => acc(a, g.map(|x| x * k)),
            &Op::AddScalar(a) => acc(a, g.clone()),
            &Op::LeakyRelu(a, slope) => acc(
                a,
                g.zip_map(val(a), |x, y| if y > 0.0 { x } else { slope * x }),
            ),
            &Op::Sigmoid(a) => acc(a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))),
            &Op::Tanh(a) => acc(a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
            &Op::Abs(a) => acc(
                a,
                g.zip_map(val(a), |x, y| {
                    if y > 0.0 {
                        x
                    } else if y < 0.0 {
                        -x
                    } else {
                        0.0
                    }
                }),
            ),
            &Op::Square(a) => acc(a, g.zip_map(val(a), |x, y| 2.0 * x * y)),
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if needs(p) {
                        let mut piece = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            piece
                                .row_slice_mut(r)
                                .copy_from_slice(&g.row_slice(r)[off..off + w]);
                        }
                        acc(p, piece);
                    }
                    off += w;
                }
            }
            &Op::Sum(a) => {
                let t = val(a);
                acc(a, Tensor::filled(t.rows(), t.cols(), g.data()[0]));
            }
            &Op::Mean(a) => {
                let t = val(a);
                let k = g.data()[0] / t.len() as f64;
                acc(a, Tensor::filled(t.rows(), t.cols(), k));
            }
            &Op::RowNorm(a) => {
                let t = val(a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    let n = node.value.data()[r];
                    if n > 0.0 {
                        let k = g.data()[r] / n;
                        for (o, x) in d.row_slice_mut(r).iter_mut().zip(t.row_slice(r)) {
                            *o = k * x;
                        }
                    }
                }
                acc(a, d);
            }
            &Op::GroupMean(a, group) => {
                let t = val(a);
                let mut d = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    for (o, x) in d.row_slice_mut(r).iter_mut().zip(g.row_slice(r / group)) {
                        *o = x / group as f64;
                    }
                }
                acc(a, d);
            }
            &Op::BroadcastRows(a) => acc(a, column_sums(g)),
            &Op::RowCosine(a, b) => {
                let (x, y) = (val(a), val(b));
                let mut da = Tensor::zeros(x.rows(), x.cols());
                let mut db = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let (xr, yr) = (x.row_slice(r), y.row_slice(r));
                    let (nx, ny) = (l2_norm(xr), l2_norm(yr));
                    let c = node.value.data()[r];
                    let gr = g.data()[r];
                    for j in 0..xr.len() {
                        da.row_slice_mut(r)[j] = gr * (yr[j] / (nx * ny) - c * xr[j] / (nx * nx));
                        db.row_slice_mut(r)[j] = gr * (xr[j] / (nx * ny) - c * yr[j] / (ny * ny));
                    }
                }
                acc(a, da);
                acc(b, db);
            }
            &Op::PairwiseCosine(a) => {
                let x = val(a);
                let u = unit_rows(x, "pairwise_cosine")?;
                // dL/du = (G + G^T) u
                let gs = g.zip_map(&g.transpose(), |p, q| p + q);
                let du = gs.matmul(&u)?;
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = l2_norm(x.row_slice(r));
                    let ur = u.row_slice(r);
                    let dur = du.row_slice(r);
                    let proj = dot(ur, dur);
                    for (j, o) in dx.row_slice_mut(r).iter_mut().enumerate() {
                        *o = (dur[j] - proj * ur[j]) / n;
                    }
                }
                acc(a, dx);
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len() as f64;
                let k = g.data()[0] / n;
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d.row_slice_mut(r)[l] -= 1.0;
                }
                acc(*logits, d.map(|x| x * k));
            }
        }
        Ok(())
    }
}

/// Per-node gradients from one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    graph: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seed with respect to `v`; `None` when `v` is constant
    /// or unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but yields zeros shaped like `like` when absent.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, x) in out.iter_mut().zip(g.row_slice(r)) {
            *o += x;
        }
    }
    Tensor::row(&out)
}

fn unit_rows(x: &Tensor, ctx: &str) -> Result<Tensor> {
    let mut u = x.clone();
    for r in 0..x.rows() {
        let n = l2_norm(x.row_slice(r));
        if n == 0.0 {
            return Err(Error::ZeroNorm(format!("{ctx} row {r}")));
        }
        for v in u.row_slice_mut(r) {
            *v /= n;
        }
    }
    Ok(u)
}
