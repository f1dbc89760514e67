//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as it is evaluated. Parameters enter
//! through bindings to a [`ParamStore`]; a binding is either trainable (its
//! gradients are collected after [`Graph::backward`]) or frozen (its values
//! act as constants and no gradient ever reaches them).

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{matmul_grad_lhs, matmul_grad_rhs, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a parameter-store binding of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bind(usize);

/// Marks a zero-filled slot in a gather index list.
pub const GATHER_ZERO: u32 = u32::MAX;

const NORM_EPS: f64 = 1e-12;
const POOL_EPS: f64 = 1e-6;

enum Op {
    Input,
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    CrossEntropy(Var, Vec<usize>),
    BceWithLogits(Var, Tensor),
    Sum(Var),
    SumRows(Var),
    Gather(Var, Vec<u32>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Transpose(Var),
    HCat(Vec<Var>),
    VCat(Vec<Var>),
    LstmCell(Var, Var),
    MeanStdPool(Var),
    L2NormalizeRows(Var),
}

struct Binding<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

pub struct Graph<'a> {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Tensor>>,
    bindings: Vec<Binding<'a>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

pub(crate) fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
            bindings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].shape()
    }

    /// The scalar held by a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = &self.values[v.0];
        assert_eq!(t.shape(), (1, 1), "not a scalar node");
        t.data()[0]
    }

    #[inline]
    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// A constant; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// A free variable whose gradient is retained (used for probing).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Cuts gradient flow: returns a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.values[v.0].clone();
        self.input(t)
    }

    pub fn bind(&mut self, store: &'a ParamStore, trainable: bool) -> Bind {
        self.bindings.push(Binding {
            store,
            vars: vec![None; store.len()],
            trainable,
        });
        Bind(self.bindings.len() - 1)
    }

    pub fn is_trainable(&self, b: Bind) -> bool {
        self.bindings[b.0].trainable
    }

    /// The node for parameter `id` of binding `b`; created on first use.
    pub fn param(&mut self, b: Bind, id: ParamId) -> Var {
        if let Some(v) = self.bindings[b.0].vars[id.index()] {
            return v;
        }
        let binding = &self.bindings[b.0];
        let value = binding.store.get(id).clone();
        let trainable = binding.trainable;
        let v = self.push(value, if trainable { Op::Param } else { Op::Input }, trainable);
        self.bindings[b.0].vars[id.index()] = Some(v);
        v
    }

    // ---- arithmetic -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].matmul(&self.values[b.0]);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Tensor::from_vec(
            x.rows(),
            x.cols(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p + q);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p - q);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_with(a, b, |p, q| p * q);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds the `1×c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (&self.values[a.0], &self.values[row.0]);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(x.cols(), r.cols(), "add_row width mismatch");
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.values[a.0].map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.values[a.0].map(|x| x + s);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.values[a.0].map(f);
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.values[a.0].clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// `Σ_r −log softmax(logits_r)[targets_r]` as a 1×1 node.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = &self.values[logits.0];
        assert_eq!(x.rows(), targets.len(), "one target per row");
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row(r);
            assert!(t < row.len(), "target id out of range");
            total += log_sum_exp(row) - row[t];
        }
        let ng = self.ng(logits);
        self.push(Tensor::scalar(total), Op::CrossEntropy(logits, targets.to_vec()), ng)
    }

    /// `Σ softplus(x) − y·x`, the summed binary cross-entropy with logits.
    pub fn bce_with_logits_sum(&mut self, logits: Var, labels: Tensor) -> Var {
        let x = &self.values[logits.0];
        assert_eq!(x.shape(), labels.shape(), "label shape mismatch");
        let total: f64 = x
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&v, &y)| softplus(v) - y * v)
            .sum();
        let ng = self.ng(logits);
        self.push(Tensor::scalar(total), Op::BceWithLogits(logits, labels), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `r×c → 1×c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let mut out = Tensor::zeros(1, x.cols());
        for r in 0..x.rows() {
            for (o, &v) in out.data_mut().iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    // ---- layout -----------------------------------------------------------

    /// `out.data[i] = a.data[idx[i]]`, or 0 where `idx[i] == GATHER_ZERO`.
    pub fn gather(&mut self, a: Var, rows: usize, cols: usize, idx: Vec<u32>) -> Var {
        assert_eq!(rows * cols, idx.len(), "gather index length mismatch");
        let src = self.values[a.0].data();
        let data = idx
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i as usize] })
            .collect();
        let ng = self.ng(a);
        self.push(Tensor::from_vec(rows, cols, data), Op::Gather(a, idx), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = &self.values[a.0];
        assert!(start < end && end <= x.cols(), "column slice out of range");
        let mut out = Tensor::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = &self.values[a.0];
        assert!(start < end && end <= x.rows(), "row slice out of range");
        let c = x.cols();
        let out = Tensor::from_vec(end - start, c, x.data()[start * c..end * c].to_vec());
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        self.slice_rows(a, r, r + 1)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.values[a.0].clone().reshaped(rows, cols);
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.values[a.0].transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    /// Repeats a `1×c` row `n` times.
    pub fn repeat_row(&mut self, a: Var, n: usize) -> Var {
        let c = self.values[a.0].cols();
        assert_eq!(self.values[a.0].rows(), 1);
        let idx = (0..n).flat_map(|_| 0..c as u32).collect();
        self.gather(a, n, c, idx)
    }

    pub fn hcat(&mut self, parts: &[Var]) -> Var {
        let rows = self.values[parts[0].0].rows();
        let cols: usize = parts
            .iter()
            .map(|p| {
                assert_eq!(self.values[p.0].rows(), rows, "hcat row mismatch");
                self.values[p.0].cols()
            })
            .sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.values[p.0].row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::HCat(parts.to_vec()), ng)
    }

    pub fn vcat(&mut self, parts: &[Var]) -> Var {
        let cols = self.values[parts[0].0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &self.values[p.0];
            assert_eq!(t.cols(), cols, "vcat column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::VCat(parts.to_vec()), ng)
    }

    // ---- fused layers -----------------------------------------------------

    /// LSTM cell update from pre-activation gates `[i f g o]` (`r×4H`) and
    /// the previous cell state (`r×H`); returns `[h | c]` (`r×2H`).
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Var {
        let (g, cp) = (&self.values[gates.0], &self.values[c_prev.0]);
        let h = cp.cols();
        assert_eq!(g.cols(), 4 * h, "lstm gate width mismatch");
        assert_eq!(g.rows(), cp.rows());
        let mut out = Tensor::zeros(g.rows(), 2 * h);
        for r in 0..g.rows() {
            let gr = g.row(r);
            let cr = cp.row(r);
            let or = out.row_mut(r);
            for j in 0..h {
                let i = sigmoid(gr[j]);
                let f = sigmoid(gr[h + j]);
                let gg = gr[2 * h + j].tanh();
                let o = sigmoid(gr[3 * h + j]);
                let c = f * cr[j] + i * gg;
                or[j] = o * c.tanh();
                or[h + j] = c;
            }
        }
        let ng = self.ng(gates) || self.ng(c_prev);
        self.push(out, Op::LstmCell(gates, c_prev), ng)
    }

    /// Mean and standard deviation over rows: `T×C → 1×2C`.
    pub fn mean_std_pool(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let (t, c) = x.shape();
        let mut out = Tensor::zeros(1, 2 * c);
        let od = out.data_mut();
        for r in 0..t {
            for (j, &v) in x.row(r).iter().enumerate() {
                od[j] += v;
            }
        }
        for v in od[..c].iter_mut() {
            *v /= t as f64;
        }
        for r in 0..t {
            for (j, &v) in x.row(r).iter().enumerate() {
                let d = v - od[j];
                od[c + j] += d * d;
            }
        }
        for j in 0..c {
            od[c + j] = (od[c + j] / t as f64 + POOL_EPS).sqrt();
        }
        let ng = self.ng(a);
        self.push(out, Op::MeanStdPool(a), ng)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.values[a.0].clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::L2NormalizeRows(a), ng)
    }

    // ---- backward ---------------------------------------------------------

    fn acc(grads: &mut [Option<Tensor>], values: &[Tensor], v: Var, f: impl FnOnce(&mut [f64])) {
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = values[v.0].shape();
            *slot = Some(Tensor::zeros(r, c));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    /// Back-propagates from the 1×1 node `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.values[loss.0].shape(), (1, 1), "backward from a non-scalar");
        self.grads = vec![None; self.values.len()];
        if !self.needs_grad[loss.0] {
            return;
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        let values = &self.values;
        let needs = &self.needs_grad;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            if !needs[i] {
                continue;
            }
            let op = &self.ops[i];
            if matches!(op, Op::Input | Op::Leaf | Op::Param) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let gd = g.data();
            let y = &values[i];
            match op {
                Op::Input | Op::Leaf | Op::Param => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&values[a.0], &values[b.0]);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if needs[a.0] {
                        Self::acc(grads, values, *a, |d| matmul_grad_lhs(gd, bv.data(), d, m, k, n));
                    }
                    if needs[b.0] {
                        Self::acc(grads, values, *b, |d| matmul_grad_rhs(av.data(), gd, d, m, k, n));
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if needs[v.0] {
                            Self::acc(grads, values, *v, |d| add_into(d, gd));
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if needs[a.0] {
                        Self::acc(grads, values, *a, |d| add_into(d, gd));
                    }
                    if needs[b.0] {
                        Self::acc(grads, values, *b, |d| {
                            for (x, &gv) in d.iter_mut().zip(gd) {
                                *x -= gv;
                            }
                        });
                    }
                }
                Op::Mul(a, b) => {
                    if needs[a.0] {
                        let bv = values[b.0].data();
                        Self::acc(grads, values, *a, |d| {
                            for ((x, &gv), &o) in d.iter_mut().zip(gd).zip(bv) {
                                *x += gv * o;
                            }
                        });
                    }
                    if needs[b.0] {
                        let av = values[a.0].data();
                        Self::acc(grads, values, *b, |d| {
                            for ((x, &gv), &o) in d.iter_mut().zip(gd).zip(av) {
                                *x += gv * o;
                            }
                        });
                    }
                }
                Op::AddRow(a, row) => {
                    if needs[a.0] {
                        Self::acc(grads, values, *a, |d| add_into(d, gd));
                    }
                    if needs[row.0] {
                        let c = g.cols();
                        Self::acc(grads, values, *row, |d| {
                            for r in 0..g.rows() {
                                add_into(d, &gd[r * c..(r + 1) * c]);
                            }
                        });
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    Self::acc(grads, values, *a, |d| {
                        for (x, &gv) in d.iter_mut().zip(gd) {
                            *x += s * gv;
                        }
                    });
                }
                Op::AddScalar(a) => Self::acc(grads, values, *a, |d| add_into(d, gd)),
                Op::Sigmoid(a) => Self::acc(grads, values, *a, |d| {
                    for ((x, &gv), &yv) in d.iter_mut().zip(gd).zip(y.data()) {
                        *x += gv * yv * (1.0 - yv);
                    }
                }),
                Op::Tanh(a) => Self::acc(grads, values, *a, |d| {
                    for ((x, &gv), &yv) in d.iter_mut().zip(gd).zip(y.data()) {
                        *x += gv * (1.0 - yv * yv);
                    }
                }),
                Op::Relu(a) => {
                    let xv = values[a.0].data();
                    Self::acc(grads, values, *a, |d| {
                        for ((x, &gv), &inp) in d.iter_mut().zip(gd).zip(xv) {
                            if inp > 0.0 {
                                *x += gv;
                            }
                        }
                    })
                }
                Op::Exp(a) => Self::acc(grads, values, *a, |d| {
                    for ((x, &gv), &yv) in d.iter_mut().zip(gd).zip(y.data()) {
                        *x += gv * yv;
                    }
                }),
                Op::Abs(a) => {
                    let xv = values[a.0].data();
                    Self::acc(grads, values, *a, |d| {
                        for ((x, &gv), &inp) in d.iter_mut().zip(gd).zip(xv) {
                            if inp > 0.0 {
                                *x += gv;
                            } else if inp < 0.0 {
                                *x -= gv;
                            }
                        }
                    })
                }
                Op::Square(a) => {
                    let xv = values[a.0].data();
                    Self::acc(grads, values, *a, |d| {
                        for ((x, &gv), &inp) in d.iter_mut().zip(gd).zip(xv) {
                            *x += 2.0 * inp * gv;
                        }
                    })
                }
                Op::SoftmaxRows(a) => {
                    let c = y.cols();
                    Self::acc(grads, values, *a, |d| {
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &gd[r * c..(r + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for j in 0..c {
                                d[r * c + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    })
                }
                Op::CrossEntropy(a, targets) => {
                    let scale = gd[0];
                    let x = &values[a.0];
                    let c = x.cols();
                    Self::acc(grads, values, *a, |d| {
                        for (r, &t) in targets.iter().enumerate() {
                            let mut p = x.row(r).to_vec();
                            softmax_in_place(&mut p);
                            p[t] -= 1.0;
                            for j in 0..c {
                                d[r * c + j] += scale * p[j];
                            }
                        }
                    })
                }
                Op::BceWithLogits(a, labels) => {
                    let scale = gd[0];
                    let x = values[a.0].data();
                    Self::acc(grads, values, *a, |d| {
                        for ((o, &v), &lbl) in d.iter_mut().zip(x).zip(labels.data()) {
                            *o += scale * (sigmoid(v) - lbl);
                        }
                    })
                }
                Op::Sum(a) => {
                    let s = gd[0];
                    Self::acc(grads, values, *a, |d| {
                        for x in d.iter_mut() {
                            *x += s;
                        }
                    })
                }
                Op::SumRows(a) => {
                    let c = g.cols();
                    Self::acc(grads, values, *a, |d| {
                        for chunk in d.chunks_mut(c) {
                            add_into(chunk, gd);
                        }
                    })
                }
                Op::Gather(a, idx) => Self::acc(grads, values, *a, |d| {
                    for (&i, &gv) in idx.iter().zip(gd) {
                        if i != GATHER_ZERO {
                            d[i as usize] += gv;
                        }
                    }
                }),
                Op::SliceCols(a, start) => {
                    let src_cols = values[a.0].cols();
                    let w = g.cols();
                    let start = *start;
                    Self::acc(grads, values, *a, |d| {
                        for r in 0..g.rows() {
                            add_into(
                                &mut d[r * src_cols + start..r * src_cols + start + w],
                                &gd[r * w..(r + 1) * w],
                            );
                        }
                    })
                }
                Op::SliceRows(a, start) => {
                    let c = g.cols();
                    let off = start * c;
                    Self::acc(grads, values, *a, |d| add_into(&mut d[off..off + gd.len()], gd))
                }
                Op::Reshape(a) => Self::acc(grads, values, *a, |d| add_into(d, gd)),
                Op::Transpose(a) => {
                    let (r, c) = g.shape();
                    Self::acc(grads, values, *a, |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[j * r + i] += gd[i * c + j];
                            }
                        }
                    })
                }
                Op::HCat(parts) => {
                    let total = g.cols();
                    let mut off = 0;
                    for p in parts {
                        let w = values[p.0].cols();
                        if needs[p.0] {
                            Self::acc(grads, values, *p, |d| {
                                for r in 0..g.rows() {
                                    add_into(&mut d[r * w..(r + 1) * w], &gd[r * total + off..r * total + off + w]);
                                }
                            });
                        }
                        off += w;
                    }
                }
                Op::VCat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = values[p.0].len();
                        if needs[p.0] {
                            Self::acc(grads, values, *p, |d| add_into(d, &gd[off..off + n]));
                        }
                        off += n;
                    }
                }
                Op::LstmCell(gates, c_prev) => {
                    let (gv, cp) = (&values[gates.0], &values[c_prev.0]);
                    let h = cp.cols();
                    let rows = gv.rows();
                    let mut dgates = vec![0.0; rows * 4 * h];
                    let mut dcp = vec![0.0; rows * h];
                    for r in 0..rows {
                        let gr = gv.row(r);
                        let cr = cp.row(r);
                        let yr = y.row(r);
                        let gr_out = &gd[r * 2 * h..(r + 1) * 2 * h];
                        for j in 0..h {
                            let i = sigmoid(gr[j]);
                            let f = sigmoid(gr[h + j]);
                            let gg = gr[2 * h + j].tanh();
                            let o = sigmoid(gr[3 * h + j]);
                            let c = yr[h + j];
                            let tc = c.tanh();
                            let dh = gr_out[j];
                            let dc = gr_out[h + j] + dh * o * (1.0 - tc * tc);
                            let base = r * 4 * h;
                            dgates[base + j] = dc * gg * i * (1.0 - i);
                            dgates[base + h + j] = dc * cr[j] * f * (1.0 - f);
                            dgates[base + 2 * h + j] = dc * i * (1.0 - gg * gg);
                            dgates[base + 3 * h + j] = dh * tc * o * (1.0 - o);
                            dcp[r * h + j] = dc * f;
                        }
                    }
                    if needs[gates.0] {
                        Self::acc(grads, values, *gates, |d| add_into(d, &dgates));
                    }
                    if needs[c_prev.0] {
                        Self::acc(grads, values, *c_prev, |d| add_into(d, &dcp));
                    }
                }
                Op::MeanStdPool(a) => {
                    let x = &values[a.0];
                    let (t, c) = x.shape();
                    let yd = y.data();
                    let tf = t as f64;
                    Self::acc(grads, values, *a, |d| {
                        for r in 0..t {
                            let xr = x.row(r);
                            for j in 0..c {
                                let mu = yd[j];
                                let sd = yd[c + j];
                                d[r * c + j] += gd[j] / tf + gd[c + j] * (xr[j] - mu) / (tf * sd);
                            }
                        }
                    })
                }
                Op::L2NormalizeRows(a) => {
                    let x = &values[a.0];
                    let c = x.cols();
                    Self::acc(grads, values, *a, |d| {
                        for r in 0..x.rows() {
                            let xr = x.row(r);
                            let yr = y.row(r);
                            let gr = &gd[r * c..(r + 1) * c];
                            let n = (xr.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for j in 0..c {
                                d[r * c + j] += (gr[j] - yr[j] * dot) / n;
                            }
                        }
                    })
                }
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of binding `b` (zeros where unused or frozen).
    pub fn param_grads(&self, b: Bind) -> Grads {
        let binding = &self.bindings[b.0];
        let tensors = binding
            .store
            .ids()
            .map(|id| {
                let t = binding.store.get(id);
                match binding.vars[id.index()] {
                    Some(v) if binding.trainable => self
                        .grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())),
                    _ => Tensor::zeros(t.rows(), t.cols()),
                }
            })
            .collect();
        Grads::from_tensors(tensors)
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
