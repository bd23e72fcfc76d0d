//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Operations append nodes in
//! topological order, so [`Graph::backward`] is a single reverse sweep that
//! visits each node once. Trainable parameters live in a [`ParamSet`] outside
//! the graph; [`Graph::param`] copies a parameter in as a leaf and
//! [`Graph::backward_into`] accumulates leaf gradients back into the set.
//!
//! Broadcasting is limited to scalar-vs-tensor for the elementwise binary
//! ops. The handful of row-structured operations the model and losses need
//! (bias add, row normalization, masked row log-sum-exp, column gather) are
//! dedicated primitives with their own backward rules.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grad: Option<Vec<f64>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor { shape, data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false, grad: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`.
fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`.
fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    Relu,
    Neg,
    Scale(f64),
    Offset(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
    L2Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    LeftScalar,
    RightScalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary { op: BinaryOp, a: Var, b: Var, bcast: Broadcast },
    Unary { op: UnaryOp, x: Var },
    AddBias { x: Var, bias: Var },
    Reduce { op: ReduceOp, x: Var, axis: Option<usize>, argmax: Vec<usize> },
    NormalizeRows { x: Var, xi: f64, norms: Vec<f64> },
    MaskedLogSumExp { x: Var, mask: Vec<bool>, rows: Vec<usize> },
    Gather { x: Var, cols: Vec<usize> },
    Contrastive { z: Var, tau: f64, groups: Vec<usize>, anchors: Vec<usize>, e: Vec<f64>, all: Vec<f64>, pos: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(Var, usize)>,
}

/// Adjoints of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; `None` when no path exists.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.adjoints.get(v.0).filter(|g| !g.is_empty()).map(Vec::as_slice)
    }
}

fn scalar_shape(shape: &[usize]) -> bool {
    numel(shape) == 1
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Scalar value of `v` (first element).
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Copy of the node value as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.clone(), data: n.value.clone(), requires_grad: false, grad: None }
    }

    /// Leaf from a tensor; differentiable iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    /// Leaf for parameter `index` of `params`, tracked for [`Graph::backward_into`].
    pub fn param(&mut self, params: &ParamSet, index: usize) -> Var {
        let t = &params.tensors[index];
        let v = self.push(t.shape.clone(), t.data.clone(), Op::Leaf, true);
        self.params.push((v, index));
        v
    }

    fn expect_rank(&self, v: Var, rank: usize, what: &str) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(Error::Shape(format!(
                "{what}: expected rank {rank}, got shape {:?}",
                self.shape(v)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_rank(a, 2, "matmul lhs")?;
        self.expect_rank(b, 2, "matmul rhs")?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dimensions {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.expect_rank(a, 2, "transpose")?;
        let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
        let src = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (bcast, shape) = if sa == sb {
            (Broadcast::None, sa)
        } else if scalar_shape(&sa) {
            (Broadcast::LeftScalar, sb)
        } else if scalar_shape(&sb) {
            (Broadcast::RightScalar, sa)
        } else {
            return Err(Error::Shape(format!("cannot broadcast {sa:?} with {sb:?}")));
        };
        let n = numel(&shape);
        let (va, vb) = (self.value(a), self.value(b));
        let lhs = |i: usize| if bcast == Broadcast::LeftScalar { va[0] } else { va[i] };
        let rhs = |i: usize| if bcast == Broadcast::RightScalar { vb[0] } else { vb[i] };
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (x, y) = (lhs(i), rhs(i));
            out.push(match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => {
                    if y == 0.0 {
                        let index = if bcast == Broadcast::RightScalar { 0 } else { i };
                        return Err(Error::Domain { op: "div", index, value: y });
                    }
                    x / y
                }
            });
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Binary { op, a, b, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let src = self.value(x);
        let mut out = Vec::with_capacity(src.len());
        for (i, &v) in src.iter().enumerate() {
            out.push(match op {
                UnaryOp::Exp => v.exp(),
                UnaryOp::Log => {
                    if v <= 0.0 {
                        return Err(Error::Domain { op: "log", index: i, value: v });
                    }
                    v.ln()
                }
                UnaryOp::Relu => v.max(0.0),
                UnaryOp::Neg => -v,
                UnaryOp::Scale(c) => c * v,
                UnaryOp::Offset(c) => v + c,
            });
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Unary { op, x }, rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::Scale(c), x)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnaryOp::Offset(c), x)
    }

    /// `x[m,n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.expect_rank(x, 2, "add_bias input")?;
        let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
        if self.shape(bias) != [n] {
            return Err(Error::Shape(format!(
                "bias shape {:?} does not match {n} columns",
                self.shape(bias)
            )));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(vec![m, n], out, Op::AddBias { x, bias }, rg))
    }

    /// Reduction over all elements (`axis = None`, scalar result) or one axis.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let src = self.value(x);
        if src.is_empty() {
            return Err(Error::EmptyReduction("reduce over empty tensor"));
        }
        let (outer, len, inner, out_shape) = match axis {
            None => (1, src.len(), 1, vec![]),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::Shape(format!("axis {ax} out of range for {shape:?}")));
                }
                if shape[ax] == 0 {
                    return Err(Error::EmptyReduction("reduce over empty axis"));
                }
                let outer: usize = shape[..ax].iter().product();
                let inner: usize = shape[ax + 1..].iter().product();
                let mut s = shape.clone();
                s.remove(ax);
                (outer, shape[ax], inner, s)
            }
        };
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| src[(o * len + k) * inner + i];
                let v = match op {
                    ReduceOp::Sum => (0..len).map(at).sum(),
                    ReduceOp::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                    ReduceOp::L2Norm => (0..len).map(|k| at(k) * at(k)).sum::<f64>().sqrt(),
                    ReduceOp::Max => {
                        // Strict comparison keeps the lowest index on ties.
                        let mut best = 0;
                        for k in 1..len {
                            if at(k) > at(best) {
                                best = k;
                            }
                        }
                        argmax.push((o * len + best) * inner + i);
                        at(best)
                    }
                };
                out.push(v);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::Reduce { op, x, axis, argmax }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, None)
    }

    pub fn max(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Max, x, None)
    }

    pub fn l2norm(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::L2Norm, x, None)
    }

    /// Divide each row of `x[m,n]` by `‖row‖₂ + xi`.
    pub fn normalize_rows(&mut self, x: Var, xi: f64) -> Result<Var> {
        self.expect_rank(x, 2, "normalize_rows")?;
        let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(m);
        for row in out.chunks_mut(n.max(1)).take(m) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm + xi;
            if denom > 0.0 {
                row.iter_mut().for_each(|v| *v /= denom);
            }
            norms.push(norm);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![m, n], out, Op::NormalizeRows { x, xi, norms }, rg))
    }

    /// Stable `log Σ_{j: mask[i,j]} exp(x[i,j])` for each `i` in `rows`.
    ///
    /// Every selected row must have at least one unmasked entry.
    pub fn masked_logsumexp(&mut self, x: Var, mask: Vec<bool>, rows: Vec<usize>) -> Result<Var> {
        self.expect_rank(x, 2, "masked_logsumexp")?;
        let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
        if mask.len() != m * n {
            return Err(Error::Shape(format!("mask length {} for [{m},{n}]", mask.len())));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len());
        for &r in &rows {
            if r >= m {
                return Err(Error::Index(format!("row {r} of {m}")));
            }
            let vals = &src[r * n..(r + 1) * n];
            let msk = &mask[r * n..(r + 1) * n];
            let peak = vals
                .iter()
                .zip(msk)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if !msk.iter().any(|&k| k) {
                return Err(Error::EmptyReduction("masked row has no entries"));
            }
            if vals.iter().zip(msk).any(|(v, &k)| k && v.is_nan()) {
                out.push(f64::NAN);
                continue;
            }
            let s: f64 = vals.iter().zip(msk).filter(|(_, &k)| k).map(|(v, _)| (v - peak).exp()).sum();
            out.push(peak + s.ln());
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows.len()], out, Op::MaskedLogSumExp { x, mask, rows }, rg))
    }

    /// Row-wise log-sum-exp over all columns.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        self.expect_rank(x, 2, "logsumexp_rows")?;
        let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
        self.masked_logsumexp(x, vec![true; m * n], (0..m).collect())
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn gather(&mut self, x: Var, cols: Vec<usize>) -> Result<Var> {
        self.expect_rank(x, 2, "gather")?;
        let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
        if cols.len() != m {
            return Err(Error::Shape(format!("gather: {} indices for {m} rows", cols.len())));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(m);
        for (i, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(Error::Index(format!("column {c} of {n}")));
            }
            out.push(src[i * n + c]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![m], out, Op::Gather { x, cols }, rg))
    }

    /// Per-anchor `log Σ_{j≠i} exp(s_ij) − log Σ_{j≠i, g_j = g_i} exp(s_ij)` with
    /// `s = z zᵀ / τ`, over the rows that share their group with at least one
    /// other row. Returns the node and the anchor rows.
    ///
    /// Equivalent to two masked log-sum-exps over the similarity matrix but
    /// evaluates the symmetric exponentials once.
    pub fn contrastive_log_ratio(&mut self, z: Var, groups: &[usize], tau: f64) -> Result<(Var, Vec<usize>)> {
        self.expect_rank(z, 2, "contrastive_log_ratio")?;
        let (b, d) = (self.shape(z)[0], self.shape(z)[1]);
        if groups.len() != b {
            return Err(Error::Shape(format!("{} groups for {b} rows", groups.len())));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
        }
        let anchors: Vec<usize> = (0..b)
            .filter(|&i| (0..b).any(|j| j != i && groups[j] == groups[i]))
            .collect();
        let zv = self.value(z);
        let mut zt = vec![0.0; d * b];
        for i in 0..b {
            for p in 0..d {
                zt[p * b + i] = zv[i * d + p] / tau;
            }
        }
        // upper triangle of z zᵀ / τ, row by row so the inner loop is contiguous
        let mut e = vec![0.0; b * b];
        for i in 0..b {
            let row = &mut e[i * b + i + 1..(i + 1) * b];
            for p in 0..d {
                let zi = zv[i * d + p];
                for (r, t) in row.iter_mut().zip(&zt[p * b + i + 1..(p + 1) * b]) {
                    *r += zi * t;
                }
            }
        }
        let mut shift = f64::NEG_INFINITY;
        let mut nan = false;
        for i in 0..b {
            for &v in &e[i * b + i + 1..(i + 1) * b] {
                nan |= v.is_nan();
                shift = shift.max(v);
            }
        }
        let rg = self.rg(z);
        if nan {
            let out = vec![f64::NAN; anchors.len()];
            let op = Op::Contrastive { z, tau, groups: groups.to_vec(), anchors: anchors.clone(), e: vec![], all: vec![], pos: vec![] };
            return Ok((self.push(vec![out.len()], out, op, rg), anchors));
        }
        // one shared shift keeps the exponentials symmetric; the diagonal stays 0
        for i in 0..b {
            for j in i + 1..b {
                let v = (e[i * b + j] - shift).exp();
                e[i * b + j] = v;
                e[j * b + i] = v;
            }
        }
        let row_sums = |e: &[f64], i: usize| {
            let (mut sa, mut sp) = (0.0, 0.0);
            for (j, &v) in e[i * b..(i + 1) * b].iter().enumerate() {
                sa += v;
                if groups[j] == groups[i] {
                    sp += v;
                }
            }
            (sa, sp)
        };
        let mut all = Vec::with_capacity(anchors.len());
        let mut pos = Vec::with_capacity(anchors.len());
        let mut out = Vec::with_capacity(anchors.len());
        for &i in &anchors {
            let (mut sa, mut sp) = row_sums(&e, i);
            if !(sp > f64::MIN_POSITIVE) {
                // the shared shift underflowed this row; rescale it by its own max
                let sim: Vec<f64> = (0..b)
                    .map(|j| (0..d).map(|p| zv[i * d + p] * zt[p * b + j]).sum::<f64>())
                    .collect();
                let m = (0..b).filter(|&j| j != i).map(|j| sim[j]).fold(f64::NEG_INFINITY, f64::max);
                for j in (0..b).filter(|&j| j != i) {
                    e[i * b + j] = (sim[j] - m).exp();
                }
                (sa, sp) = row_sums(&e, i);
            }
            all.push(sa);
            pos.push(sp);
            out.push(sa.ln() - sp.ln());
        }
        let op = Op::Contrastive { z, tau, groups: groups.to_vec(), anchors: anchors.clone(), e, all, pos };
        Ok((self.push(vec![out.len()], out, op, rg), anchors))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Index(format!("root {} of {}", root.0, self.nodes.len())));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); root.0 + 1];
        adj[root.0] = vec![1.0];
        for i in (0..=root.0).rev() {
            let g = std::mem::take(&mut adj[i]);
            if g.is_empty() || !self.nodes[i].requires_grad {
                adj[i] = g;
                continue;
            }
            self.propagate(i, &g, &mut adj);
            adj[i] = g;
        }
        Ok(Gradients { adjoints: adj })
    }

    /// Backward sweep followed by accumulation of every parameter leaf's
    /// gradient into `params`.
    pub fn backward_into(&self, root: Var, params: &mut ParamSet) -> Result<Gradients> {
        let grads = self.backward(root)?;
        for &(v, idx) in &self.params {
            let t = &mut params.tensors[idx];
            match grads.get(v) {
                Some(g) => t.accumulate_grad(g),
                None => t.accumulate_grad(&vec![0.0; t.numel()]),
            }
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let acc = |v: Var, adj: &mut [Vec<f64>]| -> usize {
            if adj[v.0].is_empty() {
                adj[v.0] = vec![0.0; self.nodes[v.0].value.len()];
            }
            v.0
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.rg(*a) {
                    let ia = acc(*a, adj);
                    matmul_bt_acc(g, &self.nodes[b.0].value, &mut adj[ia], m, n, k);
                }
                if self.rg(*b) {
                    let ib = acc(*b, adj);
                    matmul_at_acc(&self.nodes[a.0].value, g, &mut adj[ib], m, k, n);
                }
            }
            Op::Transpose(a) => {
                if self.rg(*a) {
                    let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let ia = acc(*a, adj);
                    let dst = &mut adj[ia];
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Binary { op, a, b, bcast } => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let ai = |i: usize| if *bcast == Broadcast::LeftScalar { 0 } else { i };
                let bi = |i: usize| if *bcast == Broadcast::RightScalar { 0 } else { i };
                if self.rg(*a) {
                    let ia = acc(*a, adj);
                    for (i, gi) in g.iter().enumerate() {
                        let d = match op {
                            BinaryOp::Add | BinaryOp::Sub => *gi,
                            BinaryOp::Mul => gi * vb[bi(i)],
                            BinaryOp::Div => gi / vb[bi(i)],
                        };
                        adj[ia][ai(i)] += d;
                    }
                }
                if self.rg(*b) {
                    let ib = acc(*b, adj);
                    for (i, gi) in g.iter().enumerate() {
                        let d = match op {
                            BinaryOp::Add => *gi,
                            BinaryOp::Sub => -gi,
                            BinaryOp::Mul => gi * va[ai(i)],
                            BinaryOp::Div => -gi * va[ai(i)] / (vb[bi(i)] * vb[bi(i)]),
                        };
                        adj[ib][bi(i)] += d;
                    }
                }
            }
            Op::Unary { op, x } => {
                if self.rg(*x) {
                    let vx = &self.nodes[x.0].value;
                    let out = &node.value;
                    let ix = acc(*x, adj);
                    let dst = &mut adj[ix];
                    for (i, gi) in g.iter().enumerate() {
                        dst[i] += match op {
                            UnaryOp::Exp => gi * out[i],
                            UnaryOp::Log => gi / vx[i],
                            UnaryOp::Relu => {
                                if vx[i] > 0.0 {
                                    *gi
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Neg => -gi,
                            UnaryOp::Scale(c) => c * gi,
                            UnaryOp::Offset(_) => *gi,
                        };
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let n = self.nodes[bias.0].value.len();
                if self.rg(*x) {
                    let ix = acc(*x, adj);
                    adj[ix].iter_mut().zip(g).for_each(|(d, gi)| *d += gi);
                }
                if self.rg(*bias) {
                    let ib = acc(*bias, adj);
                    for row in g.chunks(n) {
                        adj[ib].iter_mut().zip(row).for_each(|(d, gi)| *d += gi);
                    }
                }
            }
            Op::Reduce { op, x, axis, argmax } => {
                if !self.rg(*x) {
                    return;
                }
                let shape = &self.nodes[x.0].shape;
                let vx = &self.nodes[x.0].value;
                let (outer, len, inner) = match axis {
                    None => (1, vx.len(), 1),
                    Some(ax) => (
                        shape[..*ax].iter().product(),
                        shape[*ax],
                        shape[ax + 1..].iter().product(),
                    ),
                };
                let ix = acc(*x, adj);
                let dst = &mut adj[ix];
                if *op == ReduceOp::Max {
                    for (gi, &src) in g.iter().zip(argmax) {
                        dst[src] += gi;
                    }
                    return;
                }
                for o in 0..outer {
                    for i in 0..inner {
                        let out_idx = o * inner + i;
                        let gi = g[out_idx];
                        for k in 0..len {
                            let src = (o * len + k) * inner + i;
                            dst[src] += match op {
                                ReduceOp::Sum => gi,
                                ReduceOp::Mean => gi / len as f64,
                                ReduceOp::L2Norm => {
                                    let norm = node.value[out_idx];
                                    if norm > 0.0 {
                                        gi * vx[src] / norm
                                    } else {
                                        0.0
                                    }
                                }
                                ReduceOp::Max => unreachable!(),
                            };
                        }
                    }
                }
            }
            Op::NormalizeRows { x, xi, norms } => {
                if !self.rg(*x) {
                    return;
                }
                let n = self.nodes[x.0].shape[1];
                let vx = &self.nodes[x.0].value;
                let ix = acc(*x, adj);
                let dst = &mut adj[ix];
                for (r, &norm) in norms.iter().enumerate() {
                    let s = norm + xi;
                    if s <= 0.0 {
                        continue;
                    }
                    let xr = &vx[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let d = &mut dst[r * n..(r + 1) * n];
                    if norm > 0.0 {
                        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let c = dot / (norm * s * s);
                        for j in 0..n {
                            d[j] += gr[j] / s - xr[j] * c;
                        }
                    } else {
                        for j in 0..n {
                            d[j] += gr[j] / s;
                        }
                    }
                }
            }
            Op::MaskedLogSumExp { x, mask, rows } => {
                if !self.rg(*x) {
                    return;
                }
                let n = self.nodes[x.0].shape[1];
                let vx = &self.nodes[x.0].value;
                let ix = acc(*x, adj);
                let dst = &mut adj[ix];
                for (k, &r) in rows.iter().enumerate() {
                    let lse = node.value[k];
                    for j in 0..n {
                        if mask[r * n + j] {
                            dst[r * n + j] += g[k] * (vx[r * n + j] - lse).exp();
                        }
                    }
                }
            }
            Op::Contrastive { z, tau, groups, anchors, e, all, pos } => {
                if !self.rg(*z) || all.is_empty() {
                    return;
                }
                let (b, d) = (self.nodes[z.0].shape[0], self.nodes[z.0].shape[1]);
                // dS = (G + Gᵀ)/τ with G_ij = g_i (e_ij/all_i − [same] e_ij/pos_i), then dZ = dS Z
                let (mut ca, mut cp) = (vec![0.0; b], vec![0.0; b]);
                for (k, &i) in anchors.iter().enumerate() {
                    ca[i] = g[k] / all[k] / tau;
                    cp[i] = g[k] / pos[k] / tau;
                }
                let mut sym = vec![0.0; b * b];
                for i in 0..b {
                    for j in i + 1..b {
                        let (eij, eji) = (e[i * b + j], e[j * b + i]);
                        let mut v = ca[i] * eij + ca[j] * eji;
                        if groups[j] == groups[i] {
                            v -= cp[i] * eij + cp[j] * eji;
                        }
                        sym[i * b + j] = v;
                        sym[j * b + i] = v;
                    }
                }
                // dZᵀ = Zᵀ dS keeps the inner loop over the batch
                let zv = &self.nodes[z.0].value;
                let mut zt = vec![0.0; d * b];
                for i in 0..b {
                    for p in 0..d {
                        zt[p * b + i] = zv[i * d + p];
                    }
                }
                let mut dzt = vec![0.0; d * b];
                matmul_acc(&zt, &sym, &mut dzt, d, b, b);
                let iz = acc(*z, adj);
                let dst = &mut adj[iz];
                for i in 0..b {
                    for p in 0..d {
                        dst[i * d + p] += dzt[p * b + i];
                    }
                }
            }
            Op::Gather { x, cols } => {
                if self.rg(*x) {
                    let n = self.nodes[x.0].shape[1];
                    let ix = acc(*x, adj);
                    for (i, &c) in cols.iter().enumerate() {
                        adj[ix][i * n + c] += g[i];
                    }
                }
            }
        }
    }
}

/// The trainable parameter set θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    #[serde(skip)]
    snapshot: Option<Vec<Vec<f64>>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new(), snapshot: None }
    }

    /// Register a parameter; returns its index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t.with_grad());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Flat index ranges of each parameter tensor, in order.
    pub fn blocks(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.tensors
            .iter()
            .map(|t| {
                let r = start..start + t.numel();
                start = r.end;
                r
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        self.tensors.iter().for_each(|t| out.extend_from_slice(&t.data));
        out
    }

    /// Flat gradient; parameters without a gradient contribute zeros.
    pub fn flat_grad(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            match &t.grad {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.numel() {
            return Err(Error::Shape(format!("flat vector of {n} for {} parameters", self.numel())));
        }
        Ok(())
    }

    /// θ ← θ + δ.
    pub fn add_in_place(&mut self, delta: &[f64]) -> Result<()> {
        self.check_len(delta.len())?;
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data.iter_mut().zip(&delta[off..off + n]).for_each(|(p, d)| *p += d);
            off += n;
        }
        Ok(())
    }

    /// Overwrite θ from a flat vector.
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        self.check_len(values.len())?;
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn snapshot(&mut self) {
        self.snapshot = Some(self.tensors.iter().map(|t| t.data.clone()).collect());
    }

    /// Restore the last snapshot bit-exactly and drop it.
    pub fn restore(&mut self) -> Result<()> {
        let snap = self
            .snapshot
            .take()
            .ok_or_else(|| Error::State("restore without snapshot".into()))?;
        for (t, s) in self.tensors.iter_mut().zip(snap) {
            t.data = s;
        }
        Ok(())
    }

    pub fn has_snapshot(&self) -> bool {
        self.snapshot.is_some()
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
