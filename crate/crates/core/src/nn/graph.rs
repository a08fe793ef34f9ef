//! Tape-based reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so a single reverse sweep over the tape yields all
//! gradients.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ShiftRowsDown(Var),
    L1 {
        pred: Var,
        target: Matrix,
    },
    BceLogits {
        logits: Var,
        target: Matrix,
        pos_weight: f64,
    },
    CrossEntropy {
        logits: Var,
        target: Matrix,
        probs: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input)
    }

    /// Brings a parameter onto the tape; repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_bt(self.value(b));
        self.push(value, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 x cols` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(x).cols());
        let r = r.row(0).to_vec();
        let mut value = self.value(x).clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is forced to zero.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Var {
        let value = softmax_rows(self.value(x), causal);
        self.push(value, Op::Softmax(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut value = xhat.clone();
        for i in 0..rows {
            for ((v, gg), bb) in value.row_mut(i).iter_mut().zip(&g).zip(&b) {
                *v = *v * gg + bb;
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                value.row_mut(i)[offset..offset + pv.cols()].copy_from_slice(pv.row(i));
            }
            offset += pv.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let mut value = Matrix::zeros(xv.rows(), len);
        for i in 0..xv.rows() {
            value
                .row_mut(i)
                .copy_from_slice(&xv.row(i)[start..start + len]);
        }
        self.push(value, Op::SliceCols { x, start })
    }

    /// Row `i` of the result is row `i - 1` of `x`; row 0 is all zeros.
    pub fn shift_rows_down(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = Matrix::zeros(xv.rows(), xv.cols());
        for i in 1..xv.rows() {
            value.row_mut(i).copy_from_slice(xv.row(i - 1));
        }
        self.push(value, Op::ShiftRowsDown(x))
    }

    /// Mean absolute error over all elements, as a `1 x 1` node.
    pub fn l1_loss(&mut self, pred: Var, target: &Matrix) -> Var {
        let p = self.value(pred);
        assert_eq!(p.shape(), target.shape(), "l1_loss shape mismatch");
        let n = p.data().len().max(1) as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n;
        self.push(
            Matrix::filled(1, 1, loss),
            Op::L1 {
                pred,
                target: target.clone(),
            },
        )
    }

    /// Mean binary cross-entropy on logits, positive terms weighted by `pos_weight`.
    pub fn bce_logits(&mut self, logits: Var, target: &Matrix, pos_weight: f64) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), target.shape(), "bce shape mismatch");
        let n = z.data().len().max(1) as f64;
        let loss = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| pos_weight * y * softplus(-z) + (1.0 - y) * softplus(z))
            .sum::<f64>()
            / n;
        self.push(
            Matrix::filled(1, 1, loss),
            Op::BceLogits {
                logits,
                target: target.clone(),
                pos_weight,
            },
        )
    }

    /// Softmax cross-entropy against target distributions, averaged over rows.
    pub fn cross_entropy_logits(&mut self, logits: Var, target: &Matrix) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), target.shape(), "cross-entropy shape mismatch");
        let probs = softmax_rows(z, false);
        let mut loss = 0.0;
        for (zr, yr) in z.iter_rows().zip(target.iter_rows()) {
            let max = zr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + zr.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += zr.iter().zip(yr).map(|(v, y)| y * (lse - v)).sum::<f64>();
        }
        loss /= z.rows().max(1) as f64;
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                target: target.clone(),
                probs,
            },
        )
    }

    /// Reverse sweep from a scalar node. Returns the gradient of every parameter
    /// that appeared on the tape.
    pub fn backward(&self, loss: Var) -> HashMap<ParamId, Matrix> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    accumulate(&mut grads, *a, g.matmul_bt(bv));
                    accumulate(&mut grads, *b, av.matmul_at(&g));
                }
                Op::MatMulBt(a, b) => {
                    // out = a bᵀ; da = g b; db = gᵀ a
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    accumulate(&mut grads, *a, g.matmul(bv));
                    accumulate(&mut grads, *b, g.matmul_at(av));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(x, row) => {
                    let mut rg = Matrix::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        for (o, v) in rg.row_mut(0).iter_mut().zip(r) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *x, g);
                    accumulate(&mut grads, *row, rg);
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads, *x, g.map(|v| v * s));
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut dg = g;
                    for (d, &v) in dg.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dg);
                }
                Op::Tanh(x) => {
                    let mut dg = g;
                    for (d, &y) in dg.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *x, dg);
                }
                Op::Softmax(x) => {
                    // masked entries have y = 0, so they receive no gradient
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yy), &gg) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o = yy * (gg - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma).row(0).to_vec();
                    let cols = xhat.cols();
                    let mut dgamma = Matrix::zeros(1, cols);
                    let mut dbeta = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(xhat.rows(), cols);
                    for i in 0..xhat.rows() {
                        let gr = g.row(i);
                        let xr = xhat.row(i);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            dgamma.row_mut(0)[c] += gr[c] * xr[c];
                            dbeta.row_mut(0)[c] += gr[c];
                            let d = gr[c] * gv[c];
                            sum_d += d;
                            sum_dx += d * xr[c];
                        }
                        let n = cols as f64;
                        let is = inv_std[i];
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            dx.row_mut(i)[c] = is / n * (n * d - sum_d - xr[c] * sum_dx);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).cols();
                        let mut pg = Matrix::zeros(g.rows(), pc);
                        for i in 0..g.rows() {
                            pg.row_mut(i)
                                .copy_from_slice(&g.row(i)[offset..offset + pc]);
                        }
                        accumulate(&mut grads, p, pg);
                        offset += pc;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..g.rows() {
                        dx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ShiftRowsDown(x) => {
                    let mut dx = Matrix::zeros(g.rows(), g.cols());
                    for i in 1..g.rows() {
                        dx.row_mut(i - 1).copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::L1 { pred, target } => {
                    let p = self.value(*pred);
                    let scale = g.get(0, 0) / p.data().len().max(1) as f64;
                    let mut dp = Matrix::zeros(p.rows(), p.cols());
                    for ((d, &a), &b) in dp.data_mut().iter_mut().zip(p.data()).zip(target.data()) {
                        *d = scale * sign(a - b);
                    }
                    accumulate(&mut grads, *pred, dp);
                }
                Op::BceLogits {
                    logits,
                    target,
                    pos_weight,
                } => {
                    let z = self.value(*logits);
                    let scale = g.get(0, 0) / z.data().len().max(1) as f64;
                    let mut dz = Matrix::zeros(z.rows(), z.cols());
                    for ((d, &zz), &y) in dz.data_mut().iter_mut().zip(z.data()).zip(target.data())
                    {
                        let s = sigmoid(zz);
                        *d = scale * (pos_weight * y * (s - 1.0) + (1.0 - y) * s);
                    }
                    accumulate(&mut grads, *logits, dz);
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let scale = g.get(0, 0) / probs.rows().max(1) as f64;
                    let mut dz = probs.clone();
                    for (d, y) in dz.data_mut().iter_mut().zip(target.data()) {
                        *d = scale * (*d - y);
                    }
                    accumulate(&mut grads, *logits, dz);
                }
            }
        }

        let mut out = HashMap::new();
        for (id, var) in &self.param_vars {
            if let Some(g) = grads[var.0].take() {
                out.insert(*id, g);
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

/// Numerically stable row softmax. The row maximum gets weight exactly
/// `exp(0) = 1` before normalization, so sufficiently peaked rows come out
/// exactly one-hot.
pub fn softmax_rows(x: &Matrix, causal: bool) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let limit = if causal {
            (i + 1).min(x.cols())
        } else {
            x.cols()
        };
        let r = &x.row(i)[..limit];
        let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(i);
        let mut sum = 0.0;
        for (oo, &v) in o.iter_mut().zip(r) {
            *oo = (v - max).exp();
            sum += *oo;
        }
        for oo in o[..limit].iter_mut() {
            *oo /= sum;
        }
    }
    out
}
