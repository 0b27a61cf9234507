//! Reverse-mode automatic differentiation over 2-D matrices.
//!
//! Every value on a [`Tape`] is a row-major matrix; vectors are `1×n` and
//! scalars `1×1`. Nodes are appended in evaluation order, so the node list is
//! already a topological order and [`Tape::backward`] walks it in reverse,
//! visiting each node once.
//!
//! Leaves either borrow their storage (parameters, input windows) or own it
//! (constants built on the fly). Only nodes downstream of a gradient-carrying
//! leaf record gradients.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to both distributions inside the KL logarithm.
pub const KL_EPS: f64 = 1e-8;
/// Variance floor inside layer normalization.
pub const LN_EPS: f64 = 1e-5;
/// Tolerance on row sums accepted by [`Tape::kl_div_rows`].
pub const DIST_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Affine { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sqrt(Var),
    SoftmaxRows { x: Var, inv_temp: f64 },
    KlDivRows { p: Var, q: Var },
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, idx: Vec<usize> },
    DivScalar { x: Var, s: Var },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Huber { x: Var, target: Vec<f64>, delta: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Sqrt(..) => "sqrt",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::KlDivRows { .. } => "kl_div_rows",
            Op::MaxPoolRows { .. } => "max_pool_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SelectRows { .. } => "select_rows",
            Op::DivScalar { .. } => "div_scalar",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Huber { .. } => "huber",
        }
    }
}

#[derive(Debug)]
struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Per-node gradients produced by [`Tape::backward`]. Only leaves keep theirs.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of leaf `v` into `t.grad`. Leaves that received no
    /// gradient contribute zeros.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.get(v) {
            Some(g) => t.accumulate_grad(g),
            None => t.accumulate_grad(&vec![0.0; t.len()]),
        }
    }
}

fn dims_of(t: &Tensor) -> Result<(usize, usize)> {
    t.matrix_dims()
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Copies a node's value out as a detached matrix.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        Tensor::new(&[r, c], self.value(v).to_vec()).expect("node dims are consistent")
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'a, [f64]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(rows, cols, Cow::Owned(value), op, needs_grad)
    }

    /// Registers a tensor as a leaf without copying it. The leaf carries a
    /// gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &'a Tensor) -> Result<Var> {
        let (r, c) = dims_of(t)?;
        Ok(self.push(r, c, Cow::Borrowed(t.values()), Op::Leaf, t.requires_grad))
    }

    /// Registers a borrowed tensor as a constant regardless of its flag.
    pub fn constant_ref(&mut self, t: &'a Tensor) -> Result<Var> {
        let (r, c) = dims_of(t)?;
        Ok(self.push(r, c, Cow::Borrowed(t.values()), Op::Leaf, false))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(Error::shape("constant", &[rows, cols], &[values.len()]));
        }
        Ok(self.push(rows, cols, Cow::Owned(values), Op::Leaf, false))
    }

    /// Owned leaf that carries a gradient; useful for tests and probes.
    pub fn variable(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(Error::shape("variable", &[rows, cols], &[values.len()]));
        }
        Ok(self.push(rows, cols, Cow::Owned(values), Op::Leaf, true))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, &[da.0, da.1], &[db.0, db.1]));
        }
        Ok(da)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push_owned(m, n, out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let out = kernels::transpose(self.value(a), m, n);
        Ok(self.push_owned(n, m, out, Op::Transpose(a), &[a]))
    }

    /// `x·w + b` with `b` broadcast across rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n), (br, bc)) = (self.dims(x), self.dims(w), self.dims(b));
        if k != k2 {
            return Err(Error::shape("affine", &[m, k], &[k2, n]));
        }
        if br != 1 || bc != n {
            return Err(Error::shape("affine(bias)", &[k2, n], &[br, bc]));
        }
        let bias = self.value(b);
        let mut out: Vec<f64> = (0..m).flat_map(|_| bias.iter().copied()).collect();
        kernels::matmul_acc(self.value(x), self.value(w), &mut out, m, k, n);
        Ok(self.push_owned(m, n, out, Op::Affine { x, w, b }, &[x, w, b]))
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (m, n) = self.same_shape(op_name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push_owned(m, n, out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (m, n) = self.dims(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push_owned(m, n, out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    /// Subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, stable_sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + e^x)`, stable for large |x|.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(i) = self.value(a).iter().position(|&x| x < 0.0) {
            let cols = self.dims(a).1;
            return Err(Error::Domain {
                op: "sqrt",
                row: i / cols,
                detail: "negative input".into(),
            });
        }
        Ok(self.map(a, f64::sqrt, Op::Sqrt(a)))
    }

    /// Row-wise `softmax(x / (tau * scale))`.
    pub fn softmax_rows(&mut self, x: Var, tau: f64, scale: f64) -> Result<Var> {
        if !(tau > 0.0 && scale > 0.0 && tau.is_finite() && scale.is_finite()) {
            return Err(Error::Usage(format!(
                "softmax_rows needs positive finite tau and scale, got tau={tau}, scale={scale}"
            )));
        }
        let (m, n) = self.dims(x);
        let inv_temp = 1.0 / (tau * scale);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            kernels::softmax_in_place(row, inv_temp);
        }
        Ok(self.push_owned(m, n, out, Op::SoftmaxRows { x, inv_temp }, &[x]))
    }

    /// Row-mean of `KL(p_i || q_i)`, both arguments floored at [`KL_EPS`]
    /// inside the logarithm. Each row of `p` and `q` must be a distribution.
    pub fn kl_div_rows(&mut self, p: Var, q: Var) -> Result<Var> {
        let (m, n) = self.same_shape("kl_div_rows", p, q)?;
        for v in [p, q] {
            for (i, row) in self.value(v).chunks(n).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > DIST_TOL || row.iter().any(|&x| x < -DIST_TOL || !x.is_finite()) {
                    return Err(Error::Domain {
                        op: "kl_div_rows",
                        row: i,
                        detail: format!("is not a probability distribution (sum {s})"),
                    });
                }
            }
        }
        let total: f64 = self
            .value(p)
            .iter()
            .zip(self.value(q))
            .map(|(&pi, &qi)| pi * (pi.max(KL_EPS).ln() - qi.max(KL_EPS).ln()))
            .sum();
        Ok(self.push_owned(1, 1, vec![total / m as f64], Op::KlDivRows { p, q }, &[p, q]))
    }

    /// Column-wise max over rows (max-pool over time); result is `1×n`.
    pub fn max_pool_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let v = self.value(x);
        let mut out = v[..n].to_vec();
        let mut argmax = vec![0usize; n];
        for i in 1..m {
            for j in 0..n {
                if v[i * n + j] > out[j] {
                    out[j] = v[i * n + j];
                    argmax[j] = i;
                }
            }
        }
        self.push_owned(1, n, out, Op::MaxPoolRows { x, argmax }, &[x])
    }

    /// Per-row normalization to zero mean and unit variance, then `γ ⊙ x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        for g in [gamma, beta] {
            if self.dims(g) != (1, n) {
                let (gr, gc) = self.dims(g);
                return Err(Error::shape("layer_norm", &[m, n], &[gr, gc]));
            }
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&a| (a - mu) * (a - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mu) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push_owned(
            m,
            n,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push_owned(1, 1, vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push_owned(1, 1, vec![s], Op::Mean(a), &[a])
    }

    /// Sums each row; result is `m×1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let out = self.value(a).chunks(n).map(|r| r.iter().sum()).collect();
        self.push_owned(m, 1, out, Op::RowSum(a), &[a])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_cols", &[m, n], &[start, len]));
        }
        let v = self.value(x);
        let out = (0..m)
            .flat_map(|i| v[i * n + start..i * n + start + len].iter().copied())
            .collect();
        Ok(self.push_owned(m, len, out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let m = self.dims(*first).0;
        let mut n = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(Error::shape("concat_cols", &[m, n], &[pm, pn]));
            }
            n += pn;
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let pn = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * pn..(i + 1) * pn]);
            }
        }
        Ok(self.push_owned(m, n, out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks matrices of equal width vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let n = self.dims(*first).1;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pn != n {
                return Err(Error::shape("concat_rows", &[m, n], &[pm, pn]));
            }
            out.extend_from_slice(self.value(p));
            m += pm;
        }
        Ok(self.push_owned(m, n, out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Gathers rows by index (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if idx.is_empty() {
            return Err(Error::Usage("select_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::shape("select_rows", &[m, n], &[bad]));
        }
        let v = self.value(x);
        let out = idx
            .iter()
            .flat_map(|&i| v[i * n..(i + 1) * n].iter().copied())
            .collect();
        Ok(self.push_owned(idx.len(), n, out, Op::SelectRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Divides every entry of `x` by the scalar node `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            let (a, b) = self.dims(s);
            return Err(Error::shape("div_scalar", &[1, 1], &[a, b]));
        }
        let (m, n) = self.dims(x);
        let d = self.scalar(s);
        let out = self.value(x).iter().map(|&a| a / d).collect();
        Ok(self.push_owned(m, n, out, Op::DivScalar { x, s }, &[x, s]))
    }

    /// Scales each row to unit Euclidean norm (rows with norm below 1e-12 are
    /// divided by 1e-12).
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let (m, n) = self.dims(x);
        let v = self.value(x);
        let norms: Vec<f64> = v
            .chunks(n)
            .map(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12))
            .collect();
        let out = v
            .chunks(n)
            .zip(&norms)
            .flat_map(|(r, &nr)| r.iter().map(move |a| a / nr))
            .collect();
        self.push_owned(m, n, out, Op::NormalizeRows { x, norms }, &[x])
    }

    /// Mean Huber (smooth-L1) loss of `x` against a constant target.
    pub fn huber(&mut self, x: Var, target: &[f64], delta: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if target.len() != m * n {
            return Err(Error::shape("huber", &[m, n], &[target.len()]));
        }
        let total: f64 = self
            .value(x)
            .iter()
            .zip(target)
            .map(|(&a, &t)| huber(a - t, delta))
            .sum();
        Ok(self.push_owned(
            1,
            1,
            vec![total / (m * n) as f64],
            Op::Huber {
                x,
                target: target.to_vec(),
                delta,
            },
            &[x],
        ))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got a {r}×{c} value"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (m, n) = (node.rows, node.cols);
        let y: &[f64] = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = self.dims(*a).1;
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(self.value(*a), g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let t = kernels::transpose(g, m, n);
                    add_into(ga, &t);
                }
            }
            Op::Affine { x, w, b } => {
                let k = self.dims(*x).1;
                if let Some(gx) = self.slot(grads, *x) {
                    kernels::matmul_nt_acc(g, self.value(*w), gx, m, n, k);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    kernels::matmul_tn_acc(self.value(*x), g, gw, m, k, n);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * c);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        if *yi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Softplus(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), xi) in ga.iter_mut().zip(g).zip(av) {
                        *d += gi * stable_sigmoid(*xi);
                    }
                }
            }
            Op::Sqrt(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *d += gi / (2.0 * yi);
                    }
                }
            }
            Op::SoftmaxRows { x, inv_temp } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] += inv_temp * yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::KlDivRows { p, q } => {
                let rows = self.dims(*p).0 as f64;
                let scale = g[0] / rows;
                let (pv, qv) = (self.value(*p), self.value(*q));
                if let Some(gp) = self.slot(grads, *p) {
                    for ((d, &pi), &qi) in gp.iter_mut().zip(pv).zip(qv) {
                        let pf = pi.max(KL_EPS);
                        let own = if pi > KL_EPS { pi / pf } else { 0.0 };
                        *d += scale * (pf.ln() - qi.max(KL_EPS).ln() + own);
                    }
                }
                if let Some(gq) = self.slot(grads, *q) {
                    for ((d, &pi), &qi) in gq.iter_mut().zip(pv).zip(qv) {
                        if qi > KL_EPS {
                            *d -= scale * pi / qi;
                        }
                    }
                }
            }
            Op::MaxPoolRows { x, argmax } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let xn = n;
                    for (j, &i) in argmax.iter().enumerate() {
                        gx[i * xn + j] += g[j];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let nf = n as f64;
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let hr = &xhat[i * n..(i + 1) * n];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            mean_d += dh;
                            mean_dh += dh * hr[j];
                        }
                        mean_d /= nf;
                        mean_dh /= nf;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            gx[i * n + j] += rstd[i] * (dh - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::RowSum(a) => {
                let an = self.dims(*a).1;
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, row) in ga.chunks_mut(an).enumerate() {
                        row.iter_mut().for_each(|d| *d += g[i]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let xn = self.dims(*x).1;
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..m {
                        add_into(&mut gx[i * xn + start..i * xn + start + n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pn = self.dims(p).1;
                    if let Some(gp) = self.slot(grads, p) {
                        for i in 0..m {
                            add_into(
                                &mut gp[i * pn..(i + 1) * pn],
                                &g[i * n + offset..i * n + offset + pn],
                            );
                        }
                    }
                    offset += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = self.slot(grads, p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SelectRows { x, idx } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::DivScalar { x, s } => {
                let d = self.scalar(*s);
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, gi)| *a += gi / d);
                }
                let xv = self.value(*x);
                if let Some(gs) = self.slot(grads, *s) {
                    let dot: f64 = g.iter().zip(xv).map(|(a, b)| a * b).sum();
                    gs[0] -= dot / (d * d);
                }
            }
            Op::NormalizeRows { x, norms } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] += (gr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                }
            }
            Op::Huber { x, target, delta } => {
                let xv = self.value(*x);
                let count = xv.len() as f64;
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, &a), &t) in gx.iter_mut().zip(xv).zip(target) {
                        let r = a - t;
                        let dr = if r.abs() < *delta { r } else { delta * r.signum() };
                        *d += g[0] * dr / count;
                    }
                }
            }
        }
    }

    /// Gradient buffer for parent `v`, allocated lazily; `None` if `v` carries
    /// no gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.rows * node.cols]))
    }

    /// Name of the operation that produced `v`; for diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn huber(r: f64, delta: f64) -> f64 {
    if r.abs() < delta {
        0.5 * r * r
    } else {
        delta * (r.abs() - 0.5 * delta)
    }
}

pub(crate) mod kernels {
    /// `out += a·b` for `a: m×k`, `b: k×n`.
    pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        let (a, b) = (&a[..m * k], &b[..k * n]);
        for (arow, orow) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
            // Four rows of `b` per pass to cut traffic on `orow`.
            let mut t = 0;
            while t + 4 <= k {
                let (a0, a1, a2, a3) = (arow[t], arow[t + 1], arow[t + 2], arow[t + 3]);
                let b0 = &b[t * n..(t + 1) * n];
                let b1 = &b[(t + 1) * n..(t + 2) * n];
                let b2 = &b[(t + 2) * n..(t + 3) * n];
                let b3 = &b[(t + 3) * n..(t + 4) * n];
                for j in 0..n {
                    orow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                }
                t += 4;
            }
            for t in t..k {
                let av = arow[t];
                let brow = &b[t * n..(t + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    /// `out += a·bᵀ` for `a: m×n`, `b: k×n`, `out: m×k`.
    pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            for t in 0..k {
                let brow = &b[t * n..(t + 1) * n];
                out[i * k + t] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }

    /// `out += aᵀ·b` for `a: m×k`, `b: m×n`, `out: k×n`.
    pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for t in 0..k {
                let av = a[i * k + t];
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[t * n..(t + 1) * n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a[i * n + j];
            }
        }
        out
    }

    pub fn softmax_in_place(row: &mut [f64], inv_temp: f64) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) * inv_temp).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(t: &mut Tape, rows: &[&[f64]]) -> Var {
        let v = rows.iter().flat_map(|r| r.iter().copied()).collect();
        t.variable(rows.len(), rows[0].len(), v).unwrap()
    }

    #[test]
    fn matmul_identity_and_known_product() {
        let mut t = Tape::new();
        let i2 = mat(&mut t, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = mat(&mut t, &[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = t.matmul(i2, b).unwrap();
        assert_eq!(t.value(c), t.value(b));

        let a = mat(&mut t, &[&[1.0, 2.0], &[3.0, 4.0]]);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.variable(2, 3, vec![0.0; 6]).unwrap();
        let b = t.variable(2, 3, vec![0.0; 6]).unwrap();
        match t.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = mat(&mut t, &[&[0.0, 0.0], &[2f64.ln(), 0.0], &[3.0, -1.0]]);
        let y = t.softmax_rows(x, 1.0, 1.0).unwrap();
        let v = t.value(y);
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 2.0 / 3.0).abs() < 1e-12);
        assert!((v[3] - 1.0 / 3.0).abs() < 1e-12);

        let hot = t.softmax_rows(x, 1000.0, 1.0).unwrap();
        let v = t.value(hot);
        assert!((v[4] - 0.5).abs() < 1e-3 && (v[5] - 0.5).abs() < 1e-3);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let mut t = Tape::new();
        let x = mat(&mut t, &[&[0.0, 1.0]]);
        assert!(matches!(t.softmax_rows(x, 0.0, 1.0), Err(Error::Usage(_))));
        assert!(matches!(t.softmax_rows(x, 1.0, -2.0), Err(Error::Usage(_))));
    }

    #[test]
    fn kl_examples() {
        let mut t = Tape::new();
        let p = mat(&mut t, &[&[0.5, 0.5], &[0.5, 0.5]]);
        let z = t.kl_div_rows(p, p).unwrap();
        assert_eq!(t.scalar(z), 0.0);

        let p = mat(&mut t, &[&[0.9, 0.1]]);
        let q = mat(&mut t, &[&[0.5, 0.5]]);
        let k = t.kl_div_rows(p, q).unwrap();
        let oracle = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        assert!((t.scalar(k) - oracle).abs() < 1e-12);
        assert!((t.scalar(k) - 0.3681).abs() < 1e-4);
    }

    #[test]
    fn kl_rejects_non_distribution_and_names_row() {
        let mut t = Tape::new();
        let p = mat(&mut t, &[&[0.5, 0.5], &[0.7, 0.7]]);
        let q = mat(&mut t, &[&[0.5, 0.5], &[0.5, 0.5]]);
        match t.kl_div_rows(p, q) {
            Err(Error::Domain { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn kl_handles_zero_probabilities() {
        let mut t = Tape::new();
        let p = mat(&mut t, &[&[1.0, 0.0]]);
        let q = mat(&mut t, &[&[0.0, 1.0]]);
        let k = t.kl_div_rows(p, q).unwrap();
        assert!(t.scalar(k).is_finite());
        assert!((t.scalar(k) - (1.0f64 / KL_EPS).ln()).abs() < 1e-9);
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut t = Tape::new();
        let x = t.variable(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let sq = t.mul(x, x).unwrap();
        let s2 = t.sum(sq);
        let g = t.backward(s2).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.variable(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn repeated_backward_accumulates_into_tensor() {
        let leaf = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap().with_grad();
        let mut sink = leaf.clone();
        let mut t = Tape::new();
        let x = t.leaf(&leaf).unwrap();
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        for _ in 0..2 {
            t.backward(s).unwrap().accumulate_into(x, &mut sink).unwrap();
        }
        assert_eq!(sink.grad.as_deref().unwrap(), &[4.0, 8.0, 12.0]);
        sink.zero_grad();
        t.backward(s).unwrap().accumulate_into(x, &mut sink).unwrap();
        assert_eq!(sink.grad.as_deref().unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let x = t.variable(1, 2, vec![3.0, 4.0]).unwrap();
        let y = t.mul(c, x).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert_eq!(softplus(1000.0), 1000.0);
    }
}
