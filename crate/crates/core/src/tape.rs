//! Reverse-mode automatic differentiation over whole matrices.
//!
//! Every primitive appends a node holding its forward value. `backward`
//! walks the tape in reverse and pushes vector-Jacobian products to the
//! parents, finally accumulating into the gradient buffers of the
//! [`ParamSet`] the parameters were read from. Nodes that do not depend on
//! any parameter are never differentiated.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{gemm, Tensor, Trans};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    Sqrt(Var),
    Recip(Var),
    Log(Var),
    LogSoftmax(Var),
    L2Normalize(Var),
    SumAll(Var),
    SumRows(Var),
    MeanCols(Var),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise log-softmax, numerically stabilised by the row maximum.
pub(crate) fn log_softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = &mut out.data_mut()[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    log_softmax_rows(x).map(f64::exp)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; gradients stop here.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Reads parameter `name` from `params`; backward accumulates into it.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let value = params.value(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string()), true))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul: {:?} x {:?}", va.shape(), vb.shape());
        let mut out = Tensor::zeros(&[va.rows(), vb.cols()]);
        gemm(va, vb, Trans { a: false, b: false }, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `x + r` with the single row `r` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(r));
        let c = vx.cols();
        assert_eq!(
            vr.len(),
            c,
            "add_row: row has {} values, matrix {} columns",
            vr.len(),
            c
        );
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(r);
        self.push(out, Op::AddRow(x, r), ng)
    }

    /// `x ⊙ r` with the single row `r` broadcast over every row of `x`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Var {
        let (vx, vr) = (self.value(x), self.value(r));
        let c = vx.cols();
        assert_eq!(
            vr.len(),
            c,
            "mul_row: row has {} values, matrix {} columns",
            vr.len(),
            c
        );
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(vr.data()) {
                *o *= b;
            }
        }
        let ng = self.ng(x) || self.ng(r);
        self.push(out, Op::MulRow(x, r), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::sqrt);
        let ng = self.ng(a);
        self.push(out, Op::Sqrt(a), ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::recip);
        let ng = self.ng(a);
        self.push(out, Op::Recip(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(out, Op::Log(a), ng)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmax(a), ng)
    }

    /// Scales every row to unit Euclidean norm. A zero row is a numeric
    /// error because its direction is undefined.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let c = va.cols();
        let mut out = va.clone();
        for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::numeric("l2_normalize", format!("row {r} has norm {norm}")));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::L2Normalize(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::SumAll(a), ng)
    }

    /// Sums each row: `n×m → n×1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let sums: Vec<f64> = va.data().chunks(c).map(|r| r.iter().sum()).collect();
        let out = Tensor::from_raw(&[va.rows(), 1], sums);
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    /// Column means: `n×m → 1×m`.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (n, c) = (va.rows(), va.cols());
        let mut means = vec![0.0; c];
        for row in va.data().chunks(c) {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v;
            }
        }
        means.iter_mut().for_each(|m| *m /= n as f64);
        let out = Tensor::from_raw(&[1, c], means);
        let ng = self.ng(a);
        self.push(out, Op::MeanCols(a), ng)
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select_rows(idx);
        let ng = self.ng(a);
        self.push(out, Op::SelectRows(a, idx.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::stack_rows(&tensors).expect("concat_rows: width mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Back-propagates from the scalar `loss`, adding `∂loss/∂θ` into the
    /// gradient buffers of `params`. Buffers are not zeroed first, so
    /// repeated calls accumulate.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut send = |v: Var, contrib: Tensor| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => params.accumulate_grad(name, &g)?,
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let mut da = Tensor::zeros(va.shape());
                        gemm(&g, vb, Trans { a: false, b: true }, 0.0, &mut da);
                        send(*a, da);
                    }
                    if self.ng(*b) {
                        let mut db = Tensor::zeros(vb.shape());
                        gemm(va, &g, Trans { a: true, b: false }, 0.0, &mut db);
                        send(*b, db);
                    }
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|x| -x));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        send(*a, g.zip_map(vb, |x, y| x * y));
                    }
                    if self.ng(*b) {
                        send(*b, g.zip_map(va, |x, y| x * y));
                    }
                }
                Op::AddRow(x, r) => {
                    if self.ng(*r) {
                        send(*r, column_sums(&g, self.value(*r).shape()));
                    }
                    send(*x, g);
                }
                Op::MulRow(x, r) => {
                    let (vx, vr) = (self.value(*x), self.value(*r));
                    let c = vx.cols();
                    if self.ng(*r) {
                        let mut dr = vec![0.0; c];
                        for (grow, xrow) in g.data().chunks(c).zip(vx.data().chunks(c)) {
                            for j in 0..c {
                                dr[j] += grow[j] * xrow[j];
                            }
                        }
                        send(*r, Tensor::from_raw(vr.shape(), dr));
                    }
                    if self.ng(*x) {
                        let mut dx = g;
                        for row in dx.data_mut().chunks_mut(c) {
                            for (d, s) in row.iter_mut().zip(vr.data()) {
                                *d *= s;
                            }
                        }
                        send(*x, dx);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    send(*a, g.map(|x| x * s));
                }
                Op::AddScalar(a) => send(*a, g),
                Op::Gelu(a) => send(*a, g.zip_map(self.value(*a), |d, x| d * gelu_grad(x))),
                Op::Relu(a) => send(*a, g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
                Op::Sqrt(a) => send(*a, g.zip_map(&node.value, |d, y| d * 0.5 / y)),
                Op::Recip(a) => send(*a, g.zip_map(&node.value, |d, y| -d * y * y)),
                Op::Log(a) => send(*a, g.zip_map(self.value(*a), |d, x| d / x)),
                Op::LogSoftmax(a) => {
                    // dx = g - softmax * rowsum(g)
                    let c = g.cols();
                    let mut dx = g.clone();
                    for (drow, yrow) in dx.data_mut().chunks_mut(c).zip(node.value.data().chunks(c)) {
                        let gs: f64 = drow.iter().sum();
                        for (d, y) in drow.iter_mut().zip(yrow) {
                            *d -= y.exp() * gs;
                        }
                    }
                    send(*a, dx);
                }
                Op::L2Normalize(a) => {
                    // dx = (g - y (y·g)) / ||x||
                    let vx = self.value(*a);
                    let c = g.cols();
                    let mut dx = g.clone();
                    for ((drow, yrow), xrow) in dx
                        .data_mut()
                        .chunks_mut(c)
                        .zip(node.value.data().chunks(c))
                        .zip(vx.data().chunks(c))
                    {
                        let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let yg: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for (d, y) in drow.iter_mut().zip(yrow) {
                            *d = (*d - y * yg) / norm;
                        }
                    }
                    send(*a, dx);
                }
                Op::SumAll(a) => {
                    let s = g.item();
                    send(*a, Tensor::full(self.value(*a).shape(), s));
                }
                Op::SumRows(a) => {
                    let va = self.value(*a);
                    let c = va.cols();
                    let mut dx = Tensor::zeros(va.shape());
                    for (r, row) in dx.data_mut().chunks_mut(c).enumerate() {
                        row.iter_mut().for_each(|d| *d = g.data()[r]);
                    }
                    send(*a, dx);
                }
                Op::MeanCols(a) => {
                    let va = self.value(*a);
                    let (n, c) = (va.rows(), va.cols());
                    let mut dx = Tensor::zeros(va.shape());
                    for row in dx.data_mut().chunks_mut(c) {
                        for (d, s) in row.iter_mut().zip(g.data()) {
                            *d = s / n as f64;
                        }
                    }
                    send(*a, dx);
                }
                Op::SelectRows(a, idx) => {
                    let va = self.value(*a);
                    let c = va.cols();
                    let mut dx = Tensor::zeros(va.shape());
                    for (k, &r) in idx.iter().enumerate() {
                        let src = g.row(k);
                        for (d, s) in dx.row_mut(r).iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    debug_assert_eq!(c, g.cols());
                    send(*a, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    let c = g.cols();
                    for p in parts {
                        let vp = self.value(*p);
                        let n = vp.rows();
                        let slice = g.data()[offset * c..(offset + n) * c].to_vec();
                        send(*p, Tensor::from_raw(vp.shape(), slice));
                        offset += n;
                    }
                }
            }
        }
        Ok(())
    }
}

fn column_sums(g: &Tensor, shape: &[usize]) -> Tensor {
    let c = g.cols();
    let mut sums = vec![0.0; c];
    for row in g.data().chunks(c) {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    Tensor::from_raw(shape, sums)
}
