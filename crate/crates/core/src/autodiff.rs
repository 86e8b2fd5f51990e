//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: nodes are appended in evaluation order, so the
//! reverse of the insertion order is a valid reverse topological order and
//! [`Graph::backward`] visits every node exactly once.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{shape_err, RaptError, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Named parameter tensors, iterated in sorted name order.
pub type ParamSet = BTreeMap<String, Tensor>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Linear { x: Var, w: Var, b: Option<Var> },
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols { x: Var, start: usize },
    ConcatCols(Var, Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    GaussianNll { target: Var, mu: Var, logvar: Var },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

/// A single-threaded computation tape.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: BTreeMap<String, Var>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that participates in differentiation (e.g. an input being attributed).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Registers a named parameter borrowed from a [`ParamSet`]. Registering
    /// the same name twice returns the existing node.
    pub fn param(&mut self, name: &str, t: &'a Tensor) -> Var {
        self.borrowed(name, t, true)
    }

    /// Like [`Graph::param`] but excluded from differentiation; used when
    /// only input gradients are wanted.
    pub fn frozen_param(&mut self, name: &str, t: &'a Tensor) -> Var {
        self.borrowed(name, t, false)
    }

    fn borrowed(&mut self, name: &str, t: &'a Tensor, requires_grad: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    // ── operations ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x * w^T + b` with `x: [rows x in]`, `w: [out x in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (rows, in_dim) = (xv.rows(), xv.cols());
        let out_dim = wv.rows();
        if wv.shape().len() != 2 || wv.cols() != in_dim {
            return Err(shape_err(
                "linear",
                format!("input {:?}, weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != out_dim {
                return Err(shape_err("linear", "bias length differs from output width"));
            }
        }
        let mut out = vec![0.0; rows * out_dim];
        kernels::linear(
            xv.data(),
            wv.data(),
            b.map(|b| self.value(b).data()),
            rows,
            in_dim,
            out_dim,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::matrix(rows, out_dim, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, rg))
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let cols = xv.cols();
        if bv.len() != cols {
            return Err(shape_err("add_row", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            kernels::axpy(1.0, bv.data(), &mut out.data_mut()[r * cols..(r + 1) * cols]);
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::relu);
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(kernels::sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(shape_err("layer_norm", "affine parameters differ from feature width"));
        }
        let ones = vec![1.0; cols];
        let zeros = vec![0.0; cols];
        let mut xhat = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut xhat[r * cols..(r + 1) * cols];
            inv_std.push(kernels::layer_norm_row(row, &ones, &zeros, eps));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = xhat[r * cols + c] * g[c] + b[c];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Columns `[start, start + len)` of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if start + len > cols {
            return Err(shape_err("slice_cols", format!("[{start}, {}) of {cols}", start + len)));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(rows, len, out)?, Op::SliceCols { x, start }, rg))
    }

    /// `[a | b]` row by row.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let rows = av.rows();
        if bv.rows() != rows {
            return Err(shape_err("concat_cols", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(rows, ca + cb, out)?, Op::ConcatCols(a, b), rg))
    }

    /// Hard clamp; the gradient passes only inside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(x);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    /// Elementwise diagonal-Gaussian negative log-likelihood.
    pub fn gaussian_nll(&mut self, target: Var, mu: Var, logvar: Var) -> Result<Var> {
        self.same_shape("gaussian_nll", target, mu)?;
        self.same_shape("gaussian_nll", mu, logvar)?;
        let (t, m, l) = (self.value(target), self.value(mu), self.value(logvar));
        let data = t
            .data()
            .iter()
            .zip(m.data())
            .zip(l.data())
            .map(|((&t, &m), &l)| kernels::gaussian_nll(t, m, l))
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(target) || self.rg(mu) || self.rg(logvar);
        Ok(self.push(out, Op::GaussianNll { target, mu, logvar }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    // ── reverse pass ───────────────────────────────────────────────────

    /// Back-propagates from a scalar `loss`. Gradients accumulate additively
    /// over every path reaching a node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(RaptError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<'_>, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let g = dy.matmul(&bv.transpose()).expect("matmul grad shape");
                    self.accumulate(grads, *a, g);
                }
                if self.rg(*b) {
                    let g = av.transpose().matmul(dy).expect("matmul grad shape");
                    self.accumulate(grads, *b, g);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, in_dim, out_dim) = (xv.rows(), xv.cols(), wv.rows());
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * in_dim];
                    kernels::matmul(dy.data(), wv.data(), rows, out_dim, in_dim, &mut dx);
                    let t = Tensor::new(xv.shape().to_vec(), dx).expect("shape");
                    self.accumulate(grads, *x, t);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; out_dim * in_dim];
                    for r in 0..rows {
                        let xr = xv.row(r);
                        for o in 0..out_dim {
                            let g = dy.data()[r * out_dim + o];
                            if g != 0.0 {
                                kernels::axpy(g, xr, &mut dw[o * in_dim..(o + 1) * in_dim]);
                            }
                        }
                    }
                    let t = Tensor::new(wv.shape().to_vec(), dw).expect("shape");
                    self.accumulate(grads, *w, t);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let t = column_sums(dy, self.value(*b).shape());
                        self.accumulate(grads, *b, t);
                    }
                }
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, dy.clone());
                if self.rg(*b) {
                    let t = column_sums(dy, self.value(*b).shape());
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, dy.clone());
                self.accumulate(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, dy.zip_map(self.value(*b), |g, v| g * v));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, dy.zip_map(self.value(*a), |g, v| g * v));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, dy.map(|g| g * s)),
            Op::Relu(a) => {
                self.accumulate(grads, *a, dy.zip_map(y, |g, o| if o > 0.0 { g } else { 0.0 }))
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, dy.zip_map(y, |g, o| g * o * (1.0 - o))),
            Op::Tanh(a) => self.accumulate(grads, *a, dy.zip_map(y, |g, o| g * (1.0 - o * o))),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = dy.cols();
                let rows = dy.rows();
                let gv = self.value(*gamma).data();
                if self.rg(*x) {
                    let mut dx = vec![0.0; rows * cols];
                    let n = cols as f64;
                    for r in 0..rows {
                        let dyr = dy.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for c in 0..cols {
                            let g = dyr[c] * gv[c];
                            s1 += g;
                            s2 += g * xh[c];
                        }
                        let (m1, m2) = (s1 / n, s2 / n);
                        for c in 0..cols {
                            let g = dyr[c] * gv[c];
                            dx[r * cols + c] = inv_std[r] * (g - m1 - xh[c] * m2);
                        }
                    }
                    let t = Tensor::new(dy.shape().to_vec(), dx).expect("shape");
                    self.accumulate(grads, *x, t);
                }
                if self.rg(*gamma) {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += dy.data()[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    let t = Tensor::new(self.value(*gamma).shape().to_vec(), dg).expect("shape");
                    self.accumulate(grads, *gamma, t);
                }
                if self.rg(*beta) {
                    let t = column_sums(dy, self.value(*beta).shape());
                    self.accumulate(grads, *beta, t);
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, cols, len) = (xv.rows(), xv.cols(), dy.cols());
                let mut g = Tensor::zeros(xv.shape());
                for r in 0..rows {
                    g.data_mut()[r * cols + start..r * cols + start + len]
                        .copy_from_slice(dy.row(r));
                }
                self.accumulate(grads, *x, g);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let total = dy.cols();
                let rows = dy.rows();
                let (mut ga, mut gb) = (Vec::with_capacity(rows * ca), Vec::with_capacity(rows * (total - ca)));
                for r in 0..rows {
                    ga.extend_from_slice(&dy.row(r)[..ca]);
                    gb.extend_from_slice(&dy.row(r)[ca..]);
                }
                self.accumulate(grads, *a, Tensor::matrix(rows, ca, ga).expect("concat grad"));
                self.accumulate(grads, *b, Tensor::matrix(rows, total - ca, gb).expect("concat grad"));
            }
            Op::Clamp { x, lo, hi } => {
                let g = dy.zip_map(self.value(*x), |g, v| if v >= *lo && v <= *hi { g } else { 0.0 });
                self.accumulate(grads, *x, g);
            }
            Op::GaussianNll { target, mu, logvar } => {
                let (t, m, l) = (self.value(*target), self.value(*mu), self.value(*logvar));
                let n = dy.len();
                let mut d_mu = vec![0.0; n];
                let mut d_lv = vec![0.0; n];
                for i in 0..n {
                    let r = t.data()[i] - m.data()[i];
                    let inv_var = (-l.data()[i]).exp();
                    d_mu[i] = -dy.data()[i] * r * inv_var;
                    d_lv[i] = dy.data()[i] * 0.5 * (1.0 - r * r * inv_var);
                }
                if self.rg(*target) {
                    let g = Tensor::new(t.shape().to_vec(), d_mu.iter().map(|v| -v).collect())
                        .expect("shape");
                    self.accumulate(grads, *target, g);
                }
                if self.rg(*mu) {
                    self.accumulate(grads, *mu, Tensor::new(m.shape().to_vec(), d_mu).expect("shape"));
                }
                if self.rg(*logvar) {
                    self.accumulate(grads, *logvar, Tensor::new(l.shape().to_vec(), d_lv).expect("shape"));
                }
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Tensor::filled(av.shape(), dy.item()));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let g = dy.item() / av.len() as f64;
                self.accumulate(grads, *a, Tensor::filled(av.shape(), g));
            }
        }
    }

    /// Gradient of every registered parameter; parameters the loss does not
    /// reach get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> ParamSet {
        self.params
            .iter()
            .map(|(name, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

fn column_sums(dy: &Tensor, shape: &[usize]) -> Tensor {
    let cols = dy.cols();
    let mut out = vec![0.0; cols];
    for r in 0..dy.rows() {
        kernels::axpy(1.0, dy.row(r), &mut out);
    }
    Tensor::new(shape.to_vec(), out).expect("bias shape")
}
