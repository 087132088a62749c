//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order, so the backward sweep walks the node list in
//! reverse. Only nodes downstream of a trainable leaf carry gradients; frozen
//! leaves never receive one.
//!
//! A graph is built for one forward pass and dropped afterwards. It is not
//! shared across threads.

use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, logsumexp_row, softmax_row_into, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row-major boolean allow matrix shared by several graph nodes.
pub type SharedMask = Rc<[bool]>;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var, Option<SharedMask>),
    RowScale(Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout(Var, Vec<f64>),
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no gradient flows to it (frozen leaf,
    /// or a node not on any path to the loss).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

fn check_mask(op: &'static str, x: &Tensor, mask: &Option<SharedMask>) -> Result<()> {
    if x.shape().len() != 2 {
        return Err(Error::shape(op, x.shape(), &[0, 0]));
    }
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(Error::shape(op, x.shape(), &[m.len()]));
        }
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Frozen leaf: never receives a gradient.
    pub fn constant(&mut self, value: impl Into<Arc<Tensor>>) -> Var {
        self.nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: impl Into<Arc<Tensor>>, trainable: bool) -> Var {
        if trainable {
            self.param(value)
        } else {
            self.constant(value)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = gemm(self.value(a), false, self.value(b), false)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = gemm(self.value(a), false, self.value(b), true)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`c` bias to every row of an `r x c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c || xv.shape().len() != 2 {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// Row-wise softmax; masked entries are excluded and come out as 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<SharedMask>) -> Result<Var> {
        let xv = self.value(x);
        check_mask("softmax_rows", xv, &mask)?;
        let c = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for i in 0..xv.rows() {
            let allow = mask.as_ref().map(|m| &m[i * c..(i + 1) * c]);
            softmax_row_into(xv.row(i), allow, &mut out[i * c..(i + 1) * c])
                .ok_or(Error::DegenerateRow { row: i })?;
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// Row-wise log-sum-exp as an `r x 1` column. Fully masked rows give `-inf`.
    pub fn logsumexp_rows(&mut self, x: Var, mask: Option<SharedMask>) -> Result<Var> {
        let xv = self.value(x);
        check_mask("logsumexp_rows", xv, &mask)?;
        let c = xv.cols();
        let out: Vec<f64> = (0..xv.rows())
            .map(|i| logsumexp_row(xv.row(i), mask.as_ref().map(|m| &m[i * c..(i + 1) * c])))
            .collect();
        let out = Tensor::matrix(out.len(), 1, out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSumExpRows(x, mask), rg))
    }

    /// Multiplies row `i` of `x` by `s[i]`, where `s` is an `r x 1` column.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if sv.len() != xv.rows() || xv.shape().len() != 2 {
            return Err(Error::shape("row_scale", xv.shape(), sv.shape()));
        }
        let c = xv.cols();
        let mut data = xv.data().to_vec();
        for (row, &k) in data.chunks_mut(c.max(1)).zip(sv.data()) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::RowScale(x, s), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_K * (v + GELU_C * v * v * v)).tanh()));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d || xv.shape().len() != 2 {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for i in 0..rows {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_cols(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    /// Selects rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index { index: id, len: rows });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Inverted dropout: `keep` holds `0` or `1/(1-rate)` per element.
    pub fn dropout(&mut self, x: Var, keep: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if keep.len() != xv.len() {
            return Err(Error::shape("dropout", xv.shape(), &[keep.len()]));
        }
        let data = xv.data().iter().zip(&keep).map(|(a, k)| a * k).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout(x, keep), rg))
    }

    /// `-log softmax(logits)[label]` for a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.value(logits);
        let k = lv.len();
        if label >= k {
            return Err(Error::Label(format!("label {label} out of range for {k} classes")));
        }
        let lse = logsumexp_row(lv.data(), None);
        let probs: Vec<f64> = lv.data().iter().map(|v| (v - lse).exp()).collect();
        let loss = lse - lv.data()[label];
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Gradients of the scalar node `loss` (seeded with 1).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], gemm(&g, false, self.value(*b), true)?);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], gemm(self.value(*a), true, &g, false)?);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], gemm(&g, false, self.value(*b), false)?);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], gemm(&g, true, self.value(*a), false)?);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g.zip_with(self.value(*b), "mul", |x, y| x * y)?);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g.zip_with(self.value(*a), "mul", |x, y| x * y)?);
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.rg(*bias) {
                        let c = g.cols();
                        let mut db = vec![0.0; c];
                        for row in g.data().chunks(c) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        let shape = self.value(*bias).shape().to_vec();
                        accumulate(&mut grads[bias.0], Tensor::new(shape, db)?);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads[x.0], g.scale(*s));
                }
                Op::AddScalar(x) => {
                    accumulate(&mut grads[x.0], g);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let c = y.cols();
                    let mut dx = vec![0.0; y.len()];
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::LogSumExpRows(x, mask) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    for i in 0..xv.rows() {
                        let lse = node.value.data()[i];
                        if lse == f64::NEG_INFINITY {
                            continue;
                        }
                        let gi = g.data()[i];
                        for j in 0..c {
                            let allowed = mask.as_ref().map_or(true, |m| m[i * c + j]);
                            if allowed {
                                dx[i * c + j] = gi * (xv.get(i, j) - lse).exp();
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::RowScale(x, s) => {
                    let (xv, sv) = (self.value(*x), self.value(*s));
                    let c = xv.cols();
                    if self.rg(*x) {
                        let mut dx = g.data().to_vec();
                        for (row, &k) in dx.chunks_mut(c.max(1)).zip(sv.data()) {
                            row.iter_mut().for_each(|v| *v *= k);
                        }
                        accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx)?);
                    }
                    if self.rg(*s) {
                        let ds: Vec<f64> = (0..xv.rows())
                            .map(|i| xv.row(i).iter().zip(g.row(i)).map(|(a, b)| a * b).sum())
                            .collect();
                        accumulate(&mut grads[s.0], Tensor::new(sv.shape().to_vec(), ds)?);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let dx = g.zip_with(y, "sigmoid", |gv, yv| gv * yv * (1.0 - yv))?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Gelu(x) => {
                    let dx = g.zip_with(self.value(*x), "gelu", |gv, v| {
                        let t = (GELU_K * (v + GELU_C * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    })?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gamma);
                    let d = gv.len();
                    let rows = rstd.len();
                    if self.rg(*gamma) || self.rg(*beta) {
                        let mut dg = vec![0.0; d];
                        let mut db = vec![0.0; d];
                        for i in 0..rows {
                            for j in 0..d {
                                dg[j] += g.data()[i * d + j] * xhat[i * d + j];
                                db[j] += g.data()[i * d + j];
                            }
                        }
                        if self.rg(*gamma) {
                            accumulate(&mut grads[gamma.0], Tensor::new(gv.shape().to_vec(), dg)?);
                        }
                        if self.rg(*beta) {
                            let shape = self.value(*beta).shape().to_vec();
                            accumulate(&mut grads[beta.0], Tensor::new(shape, db)?);
                        }
                    }
                    if self.rg(*x) {
                        let mut dx = vec![0.0; rows * d];
                        for i in 0..rows {
                            let mut sum_gh = 0.0;
                            let mut sum_gh_xhat = 0.0;
                            for j in 0..d {
                                let gh = g.data()[i * d + j] * gv.data()[j];
                                sum_gh += gh;
                                sum_gh_xhat += gh * xhat[i * d + j];
                            }
                            for j in 0..d {
                                let gh = g.data()[i * d + j] * gv.data()[j];
                                dx[i * d + j] = rstd[i] / d as f64
                                    * (d as f64 * gh - sum_gh - xhat[i * d + j] * sum_gh_xhat);
                            }
                        }
                        let shape = self.value(*x).shape().to_vec();
                        accumulate(&mut grads[x.0], Tensor::new(shape, dx)?);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        if self.rg(*p) {
                            accumulate(&mut grads[p.0], g.slice_rows(start, rows)?);
                        }
                        start += rows;
                    }
                }
                Op::SliceRows(x, start) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    dx[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let cols = self.value(*p).cols();
                        if self.rg(*p) {
                            accumulate(&mut grads[p.0], g.slice_cols(start, cols)?);
                        }
                        start += cols;
                    }
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let w = g.cols();
                    let mut dx = vec![0.0; xv.len()];
                    for i in 0..xv.rows() {
                        dx[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let d = tv.cols();
                    let mut dt = vec![0.0; tv.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g.data()[r * d + j];
                        }
                    }
                    accumulate(&mut grads[table.0], Tensor::new(tv.shape().to_vec(), dt)?);
                }
                Op::Dropout(x, keep) => {
                    let data = g.data().iter().zip(keep).map(|(a, k)| a * k).collect();
                    accumulate(&mut grads[x.0], Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::CrossEntropy {
                    logits,
                    label,
                    probs,
                } => {
                    let scale = g.data()[0];
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    dl[*label] -= scale;
                    let shape = self.value(*logits).shape().to_vec();
                    accumulate(&mut grads[logits.0], Tensor::new(shape, dl)?);
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads[x.0], Tensor::filled(xv.shape(), g.data()[0]));
                }
            }
        }
        Ok(Gradients { grads })
    }
}
