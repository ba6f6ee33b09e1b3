//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! The tape records the fixed operation set the encoder, embeddings and
//! objectives are built from. Forward values are computed eagerly when a node
//! is pushed; [`Graph::backward`] walks the tape once in reverse. Parameter
//! nodes borrow their values from a [`ParamStore`] and report gradients under
//! canonical names, so tied tensors accumulate contributions from every site.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::Hasher;

use crate::error::{Error, Result};
use crate::mat::{layer_norm_parts, softmax_rows, Mat, MASKED_SCORE};
use crate::params::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value<'a> {
    Owned(Mat),
    Borrowed(&'a Mat),
}

impl Value<'_> {
    fn get(&self) -> &Mat {
        match self {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }
}

enum Op {
    Input,
    Param(String),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Mat),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        scale: f64,
    },
    MaskFill {
        x: Var,
        mask: Vec<bool>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    SoftTargetXent {
        logits: Var,
        targets: Mat,
        probs: Mat,
    },
    BceLogits {
        z: Var,
        label: f64,
    },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

/// A recording of one forward computation.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node<'a>>,
    params: HashMap<String, Var>,
    branches: DefaultHasher,
}

/// Result of a backward pass.
pub struct Backward {
    node_grads: Vec<Option<Mat>>,
    params: Gradients,
}

impl Backward {
    /// Gradient of the loss with respect to a node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.node_grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients keyed by canonical name.
    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
            branches: DefaultHasher::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).get(0, 0)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Input, false)
    }

    /// Input whose gradient is recorded (readable via [`Backward::wrt`]).
    pub fn input_tracked(&mut self, m: Mat) -> Var {
        self.push(m, Op::Input, true)
    }

    /// Parameter node. Aliased names resolve to one shared node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let store = self.store;
        let canonical = store.resolve(name)?;
        if let Some(&v) = self.params.get(canonical) {
            return Ok(v);
        }
        let value = store.value(canonical)?;
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Param(canonical.to_string()),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(canonical.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::AddRow(a, b), ng))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Result<Var> {
        let out = self.value(a).hadamard(&c)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::MulConst(a, c), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Hash of every ReLU sign pattern recorded so far. Two forward passes
    /// with equal signatures took the same piecewise-linear branch.
    pub fn branch_signature(&self) -> u64 {
        self.branches.finish()
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        for chunk in self.nodes[a.0].value.get().data().chunks(64) {
            let bits = chunk.iter().enumerate().fold(0u64, |acc, (i, &x)| acc | (u64::from(x > 0.0) << i));
            self.branches.write_u64(bits);
        }
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) = layer_norm_parts(
            self.value(x),
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        )?;
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Row-wise `softmax(scale · x)`.
    pub fn softmax(&mut self, x: Var, scale: f64) -> Result<Var> {
        let out = softmax_rows(self.value(x), scale)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Softmax { x, scale }, ng))
    }

    /// Replaces entries where `mask` is true by [`MASKED_SCORE`].
    pub fn mask_fill(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let src = self.value(x);
        if mask.len() != src.len() {
            return Err(Error::ShapeMismatch(format!(
                "mask of {} entries for {} values",
                mask.len(),
                src.len()
            )));
        }
        let mut out = src.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            if m {
                *o = MASKED_SCORE;
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, Op::MaskFill { x, mask }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let mats: Vec<&Mat> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Mat::concat_rows(&mats)?;
        let ng = parts.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let mats: Vec<&Mat> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Mat::concat_cols(&mats)?;
        let ng = parts.iter().any(|&v| self.needs(v));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Rows `idx` of `table`, in order (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::IdOutOfRange {
                id: bad,
                vocab: t.rows(),
            });
        }
        let rows: Vec<&[f64]> = idx.iter().map(|&i| t.row(i)).collect();
        let out = if rows.is_empty() {
            Mat::zeros(0, t.cols())
        } else {
            Mat::from_rows(&rows)?
        };
        let ng = self.needs(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Mat::filled(1, 1, self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    /// `Σ_rows −Σ_j t_ij · log softmax(logits)_ij` as a 1×1 node. With
    /// `subtract_entropy`, the targets' own `Σ t log t` is added so the value
    /// becomes the summed KL divergence `KL(t ∥ softmax(logits))`. Rows of
    /// `targets` must be non-negative.
    pub fn soft_target_xent(&mut self, logits: Var, targets: Mat, subtract_entropy: bool) -> Result<Var> {
        let l = self.value(logits);
        if l.shape() != targets.shape() {
            return Err(Error::ShapeMismatch(format!(
                "logits {}x{} vs targets {}x{}",
                l.rows(),
                l.cols(),
                targets.rows(),
                targets.cols()
            )));
        }
        let probs = softmax_rows(l, 1.0)?;
        let mut total = 0.0;
        for i in 0..l.rows() {
            let row = l.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let mut row_loss = 0.0;
            for (&t, &x) in targets.row(i).iter().zip(row) {
                if t > 0.0 {
                    let log_p = x - lse;
                    row_loss += if subtract_entropy {
                        t * (t.ln() - log_p)
                    } else {
                        -t * log_p
                    };
                }
            }
            total += row_loss.max(0.0);
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Mat::filled(1, 1, total),
            Op::SoftTargetXent {
                logits,
                targets,
                probs,
            },
            ng,
        ))
    }

    /// Binary cross-entropy of `sigmoid(z)` against `label` for a 1×1 logit.
    pub fn bce_with_logits(&mut self, z: Var, label: f64) -> Result<Var> {
        let zv = self.value(z);
        if zv.shape() != (1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "logit must be 1x1, got {}x{}",
                zv.rows(),
                zv.cols()
            )));
        }
        let x = zv.get(0, 0);
        let loss = softplus(x) - x * label;
        let ng = self.needs(z);
        Ok(self.push(Mat::filled(1, 1, loss.max(0.0)), Op::BceLogits { z, label }, ng))
    }

    /// Reverse sweep from a 1×1 root.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NonScalarLoss { rows, cols });
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));
        let mut params = Gradients::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let send = |v: Var, g: Mat, grads: &mut Vec<Option<Mat>>| -> Result<()> {
                if !self.needs(v) {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
                Ok(())
            };
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(dy);
                }
                Op::Param(name) => {
                    params.insert(name.clone(), dy);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        send(*a, dy.matmul_t(self.value(*b))?, &mut grads)?;
                    }
                    if self.needs(*b) {
                        send(*b, self.value(*a).t_matmul(&dy)?, &mut grads)?;
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.needs(*a) {
                        send(*a, dy.matmul(self.value(*b))?, &mut grads)?;
                    }
                    if self.needs(*b) {
                        send(*b, dy.t_matmul(self.value(*a))?, &mut grads)?;
                    }
                }
                Op::Add(a, b) => {
                    send(*a, dy.clone(), &mut grads)?;
                    send(*b, dy, &mut grads)?;
                }
                Op::AddRow(a, b) => {
                    send(*b, dy.col_sums(), &mut grads)?;
                    send(*a, dy, &mut grads)?;
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        send(*a, dy.hadamard(self.value(*b))?, &mut grads)?;
                    }
                    if self.needs(*b) {
                        send(*b, dy.hadamard(self.value(*a))?, &mut grads)?;
                    }
                }
                Op::MulConst(a, c) => {
                    send(*a, dy.hadamard(c)?, &mut grads)?;
                }
                Op::Scale(a, c) => {
                    send(*a, dy.scale(*c), &mut grads)?;
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mut g = dy;
                    for (gi, &xi) in g.data_mut().iter_mut().zip(x.data()) {
                        if xi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    send(*a, g, &mut grads)?;
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut g = dy;
                    for (gi, &xi) in g.data_mut().iter_mut().zip(x.data()) {
                        *gi *= gelu_grad(xi);
                    }
                    send(*a, g, &mut grads)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain).data();
                    let n = xhat.cols();
                    if self.needs(*gain) {
                        send(*gain, dy.hadamard(xhat)?.col_sums(), &mut grads)?;
                    }
                    if self.needs(*bias) {
                        send(*bias, dy.col_sums(), &mut grads)?;
                    }
                    if self.needs(*x) {
                        let mut dx = Mat::zeros(xhat.rows(), n);
                        for i in 0..xhat.rows() {
                            let dyr = dy.row(i);
                            let xr = xhat.row(i);
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for j in 0..n {
                                let d = dyr[j] * gv[j];
                                sum_d += d;
                                sum_dx += d * xr[j];
                            }
                            let k = inv_std[i] / n as f64;
                            for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                                let d = dyr[j] * gv[j];
                                *o = k * (n as f64 * d - sum_d - xr[j] * sum_dx);
                            }
                        }
                        send(*x, dx, &mut grads)?;
                    }
                }
                Op::Softmax { x, scale } => {
                    let p = node.value.get();
                    let mut dx = Mat::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let pr = p.row(i);
                        let dr = dy.row(i);
                        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = scale * pr[j] * (dr[j] - dot);
                        }
                    }
                    send(*x, dx, &mut grads)?;
                }
                Op::MaskFill { x, mask } => {
                    let mut g = dy;
                    for (gi, &m) in g.data_mut().iter_mut().zip(mask) {
                        if m {
                            *gi = 0.0;
                        }
                    }
                    send(*x, g, &mut grads)?;
                }
                Op::SliceRows { x, start } => {
                    let (r, c) = self.shape(*x);
                    let mut g = Mat::zeros(r, c);
                    g.data_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                    send(*x, g, &mut grads)?;
                }
                Op::SliceCols { x, start } => {
                    let (r, c) = self.shape(*x);
                    let mut g = Mat::zeros(r, c);
                    let w = dy.cols();
                    for i in 0..r {
                        g.row_mut(i)[*start..start + w].copy_from_slice(dy.row(i));
                    }
                    send(*x, g, &mut grads)?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.shape(p).0;
                        if self.needs(p) {
                            send(p, dy.slice_rows(offset, rows)?, &mut grads)?;
                        }
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.shape(p).1;
                        if self.needs(p) {
                            send(p, dy.slice_cols(offset, cols)?, &mut grads)?;
                        }
                        offset += cols;
                    }
                }
                Op::GatherRows { table, idx } => {
                    let (r, c) = self.shape(*table);
                    let mut g = Mat::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, d) in g.row_mut(i).iter_mut().zip(dy.row(k)) {
                            *o += d;
                        }
                    }
                    send(*table, g, &mut grads)?;
                }
                Op::Sum(x) => {
                    let (r, c) = self.shape(*x);
                    send(*x, Mat::filled(r, c, dy.get(0, 0)), &mut grads)?;
                }
                Op::SoftTargetXent {
                    logits,
                    targets,
                    probs,
                } => {
                    let up = dy.get(0, 0);
                    let mut g = Mat::zeros(probs.rows(), probs.cols());
                    for i in 0..probs.rows() {
                        let mass: f64 = targets.row(i).iter().sum();
                        for (j, o) in g.row_mut(i).iter_mut().enumerate() {
                            *o = up * (probs.get(i, j) * mass - targets.get(i, j));
                        }
                    }
                    send(*logits, g, &mut grads)?;
                }
                Op::BceLogits { z, label } => {
                    let x = self.scalar(*z);
                    let g = Mat::filled(1, 1, dy.get(0, 0) * (sigmoid(x) - label));
                    send(*z, g, &mut grads)?;
                }
            }
        }
        Ok(Backward {
            node_grads: grads,
            params,
        })
    }
}

/// Runs the backward pass from `loss` and adds the parameter gradients into
/// the store's gradient slots. Parameters the loss never touched keep a zero
/// contribution.
pub fn compute_gradients(graph: &Graph<'_>, loss: Var, params: &mut ParamStore) -> Result<()> {
    let back = graph.backward(loss)?;
    params.accumulate(back.params())
}
