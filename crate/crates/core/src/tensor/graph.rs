//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation as a node appended to a vector, so
//! node order is a topological order and backward is a single reverse sweep
//! that visits each node once. Parameter leaves are borrowed from a
//! [`ParamStore`] rather than copied.

use std::collections::HashMap;

use super::{ParamGrads, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Input,
    Param(usize),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    GatherRows { table: Var, index: Vec<usize> },
    ScatterAddRows { x: Var, index: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    MeanRows(Var),
    Sum(Var),
    SumSquares(Var),
    NormalizeColumns(Var),
    CenterColumns(Var),
    BarlowTwins { c: Var, lambda: f64 },
    Mse { pred: Var, target: Tensor },
}

struct Node {
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const DEGENERATE_NORM: f64 = 1e-12;

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

/// Sum in ascending value order so the result does not depend on input order.
fn order_independent_sum(vals: &mut [f64]) -> f64 {
    vals.sort_by(f64::total_cmp);
    vals.iter().sum()
}

impl Graph<'static> {
    /// A graph without parameter leaves.
    pub fn standalone() -> Self {
        Graph { params: None, nodes: Vec::new(), param_vars: HashMap::new() }
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params: Some(params), nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => self.params.expect("param leaf implies a store").tensor(*i),
            (None, _) => unreachable!("only parameter leaves have no stored value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Input | Op::Param(_) => true,
            op => children(op).iter().any(|c| self.nodes[c.0].requires_grad),
        };
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let store = self
            .params
            .ok_or_else(|| Error::InvalidConfig(format!("graph has no parameters ({name})")))?;
        let i = store
            .index_of(name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter {name}")))?;
        if let Some(&v) = self.param_vars.get(&i) {
            return Ok(v);
        }
        self.nodes.push(Node { value: None, op: Op::Param(i), requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(i, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x[r, :] + bias` for every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.numel() != tx.cols() {
            return Err(shape_err("add_row", tx, tb));
        }
        let c = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % c])
            .collect();
        let out = Tensor::from_raw(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// Affine map `x W + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_row(xw, bias)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        self.push(out, Op::Softplus(x))
    }

    /// Row-wise softmax with max subtraction. Entries where `key_mask` is
    /// true are excluded and come out exactly zero.
    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        if let Some(mask) = key_mask {
            if mask.len() != c {
                return Err(Error::ShapeMismatch {
                    op: "softmax_rows mask",
                    left: tx.shape().to_vec(),
                    right: vec![mask.len()],
                });
            }
            if mask.iter().all(|&m| m) {
                return Err(Error::AllMasked(0));
            }
        }
        let keep = |j: usize| key_mask.is_none_or(|m| !m[j]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = tx.row(i);
            let max = (0..c)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for j in 0..c {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    dst[j] = e;
                    total += e;
                }
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::from_raw(tx.shape().to_vec(), out);
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    /// Normalize each row to zero mean and unit variance, then apply gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.numel() != d || tb.numel() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut out = Vec::with_capacity(tx.numel());
        for i in 0..tx.rows() {
            let (xhat, _) = normalize_row(tx.row(i));
            out.extend(
                xhat.iter()
                    .zip(tg.data().iter().zip(tb.data()))
                    .map(|(h, (g, b))| h * g + b),
            );
        }
        let out = Tensor::from_raw(tx.shape().to_vec(), out);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias }))
    }

    /// Rows `table[index[k]]` stacked in order (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(Error::TokenIdOutOfRange { id: i, vocab_size: r });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_raw(vec![index.len(), c], data);
        Ok(self.push(out, Op::GatherRows { table, index: index.to_vec() }))
    }

    /// `out[t] = sum of x[k] over k with index[k] == t`, for `rows` targets.
    /// Each sum is taken in ascending value order, so it is independent of
    /// the order of the source rows.
    pub fn scatter_add_rows(&mut self, x: Var, index: &[usize], rows: usize) -> Result<Var> {
        let tx = self.value(x);
        if index.len() != tx.rows() || index.iter().any(|&t| t >= rows) {
            return Err(Error::ShapeMismatch {
                op: "scatter_add_rows",
                left: tx.shape().to_vec(),
                right: vec![index.len(), rows],
            });
        }
        let c = tx.cols();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); rows];
        for (k, &t) in index.iter().enumerate() {
            members[t].push(k);
        }
        let mut data = vec![0.0; rows * c];
        let mut buf = Vec::new();
        for (t, srcs) in members.iter().enumerate() {
            if srcs.is_empty() {
                continue;
            }
            for j in 0..c {
                buf.clear();
                buf.extend(srcs.iter().map(|&k| tx.get(k, j)));
                data[t * c + j] = order_independent_sum(&mut buf);
            }
        }
        let out = Tensor::from_raw(vec![rows, c], data);
        Ok(self.push(out, Op::ScatterAddRows { x, index: index.to_vec() }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(Error::ShapeMismatch {
            op: "concat_cols",
            left: vec![],
            right: vec![],
        })?);
        let r = first.rows();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(shape_err("concat_cols", first, self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_raw(vec![r, total], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(Error::ShapeMismatch {
            op: "concat_rows",
            left: vec![],
            right: vec![],
        })?);
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", first, t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_raw(vec![rows, c], data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Rows `start..start + len` as a `len x cols` matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let c = t.cols();
        let out = Tensor::from_raw(vec![len, c], t.data()[start * c..(start + len) * c].to_vec());
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Column means as a `1 x cols` row (order-independent summation).
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut buf = Vec::with_capacity(r);
        let data = (0..c)
            .map(|j| {
                buf.clear();
                buf.extend((0..r).map(|i| t.get(i, j)));
                order_independent_sum(&mut buf) / r as f64
            })
            .collect();
        let out = Tensor::from_raw(vec![1, c], data);
        self.push(out, Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().map(|v| v * v).sum());
        self.push(out, Op::SumSquares(x))
    }

    /// Divide every column by its L2 norm over the rows.
    pub fn normalize_columns(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let norms = column_norms(t);
        if let Some((column, &norm)) = norms
            .iter()
            .enumerate()
            .find(|(_, &n)| n < DEGENERATE_NORM)
        {
            return Err(Error::DegenerateColumn { column, norm });
        }
        let c = t.cols();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v / norms[i % c])
            .collect();
        let out = Tensor::from_raw(t.shape().to_vec(), data);
        Ok(self.push(out, Op::NormalizeColumns(x)))
    }

    /// Subtract each column's mean.
    pub fn center_columns(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let r = t.rows() as f64;
        let means: Vec<f64> = t.column_sums().into_iter().map(|s| s / r).collect();
        let c = t.cols();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v - means[i % c])
            .collect();
        let out = Tensor::from_raw(t.shape().to_vec(), data);
        self.push(out, Op::CenterColumns(x))
    }

    /// `sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2` for square `C`.
    pub fn barlow_twins(&mut self, c: Var, lambda: f64) -> Result<Var> {
        let t = self.value(c);
        if t.rows() != t.cols() {
            return Err(shape_err("barlow_twins", t, t));
        }
        let out = Tensor::scalar(barlow_twins_terms(t, lambda).total());
        Ok(self.push(out, Op::BarlowTwins { c, lambda }))
    }

    /// Mean squared error against a fixed target of the same size.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != target.numel() {
            return Err(shape_err("mse", p, target));
        }
        let n = p.numel() as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let out = Tensor::scalar(loss);
        Ok(self.push(out, Op::Mse { pred, target: target.clone() }))
    }

    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let t = self.value(out);
        if t.numel() != 1 {
            return Err(Error::NotScalar(t.shape().to_vec()));
        }
        self.backward_seeded(out, Tensor::full(t.shape(), 1.0))
    }

    /// Backpropagate an upstream gradient `seed` (same shape as `out`).
    pub fn backward_seeded(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(out).shape() {
            return Err(shape_err("backward seed", &seed, self.value(out)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .map(|n| match n.op {
                Op::Param(p) => Some(p),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            params,
            n_params: self.params.map_or(0, ParamStore::len),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = self.nodes[i].value.as_ref();
        let like = |v: Var, data: Vec<f64>| Tensor::from_raw(self.value(v).shape().to_vec(), data);
        match &self.nodes[i].op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let g2 = Tensor::from_raw(vec![ta.rows(), tb.cols()], g.data().to_vec());
                if self.nodes[a.0].requires_grad {
                    let ga = g2.matmul(&tb.transpose()).expect("matmul grad shapes");
                    self.accumulate(grads, *a, like(*a, ga.into_data()));
                }
                if self.nodes[b.0].requires_grad {
                    let gb = ta.transpose().matmul(&g2).expect("matmul grad shapes");
                    self.accumulate(grads, *b, like(*b, gb.into_data()));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                let gt = Tensor::from_raw(vec![c, r], g.data().to_vec()).transpose();
                self.accumulate(grads, *a, like(*a, gt.into_data()));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(tb, |x, y| x * y));
                self.accumulate(grads, *b, g.zip_map(ta, |x, y| x * y));
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *b, like(*b, g.column_sums()));
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = out.expect("op output");
                self.accumulate(grads, *x, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Softplus(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| gv * sigmoid(xv));
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxRows(x) => {
                let y = out.expect("op output");
                let c = y.cols();
                let mut gx = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), &g.data()[r * c..(r + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::LayerNorm { x, gain, bias } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let d = tx.cols();
                let mut gx = vec![0.0; tx.numel()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..tx.rows() {
                    let (xhat, inv_std) = normalize_row(tx.row(r));
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dxhat: Vec<f64> = gr.iter().zip(tg.data()).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = inv_std * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        gg[j] += gr[j] * xhat[j];
                        gb[j] += gr[j];
                    }
                }
                self.accumulate(grads, *x, like(*x, gx));
                self.accumulate(grads, *gain, like(*gain, gg));
                self.accumulate(grads, *bias, like(*bias, gb));
            }
            Op::GatherRows { table, index } => {
                if !self.nodes[table.0].requires_grad {
                    return;
                }
                let t = self.value(*table);
                let c = t.cols();
                let mut gt = vec![0.0; t.numel()];
                for (k, &row) in index.iter().enumerate() {
                    for j in 0..c {
                        gt[row * c + j] += g.data()[k * c + j];
                    }
                }
                self.accumulate(grads, *table, like(*table, gt));
            }
            Op::ScatterAddRows { x, index } => {
                let c = g.cols();
                let mut gx = Vec::with_capacity(index.len() * c);
                for &t in index {
                    gx.extend_from_slice(&g.data()[t * c..(t + 1) * c]);
                }
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut gp = Vec::with_capacity(r * c);
                    for i in 0..r {
                        gp.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                    }
                    offset += c;
                    self.accumulate(grads, p, like(p, gp));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, like(p, g.data()[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let t = self.value(*x);
                let c = t.cols();
                let mut gx = vec![0.0; t.numel()];
                gx[start * c..start * c + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::MeanRows(x) => {
                let t = self.value(*x);
                let r = t.rows() as f64;
                let c = t.cols();
                let gx = (0..t.numel()).map(|k| g.data()[k % c] / r).collect();
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                let gx = vec![s; self.value(*x).numel()];
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::SumSquares(x) => {
                let s = g.data()[0];
                self.accumulate(grads, *x, self.value(*x).map(|v| 2.0 * v * s));
            }
            Op::NormalizeColumns(x) => {
                let tx = self.value(*x);
                let y = out.expect("op output");
                let norms = column_norms(tx);
                let c = tx.cols();
                let mut dots = vec![0.0; c];
                for (k, (yv, gv)) in y.data().iter().zip(g.data()).enumerate() {
                    dots[k % c] += yv * gv;
                }
                let gx = (0..tx.numel())
                    .map(|k| {
                        let j = k % c;
                        (g.data()[k] - y.data()[k] * dots[j]) / norms[j]
                    })
                    .collect();
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::CenterColumns(x) => {
                let r = g.rows() as f64;
                let c = g.cols();
                let means: Vec<f64> = g.column_sums().into_iter().map(|s| s / r).collect();
                let gx = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, v)| v - means[k % c])
                    .collect();
                self.accumulate(grads, *x, like(*x, gx));
            }
            Op::BarlowTwins { c, lambda } => {
                let t = self.value(*c);
                let n = t.cols();
                let s = g.data()[0];
                let gc = (0..t.numel())
                    .map(|k| {
                        let v = t.data()[k];
                        if k / n == k % n {
                            -2.0 * (1.0 - v) * s
                        } else {
                            2.0 * lambda * v * s
                        }
                    })
                    .collect();
                self.accumulate(grads, *c, like(*c, gc));
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let n = p.numel() as f64;
                let s = g.data()[0];
                let gp = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(a, b)| 2.0 * (a - b) / n * s)
                    .collect();
                self.accumulate(grads, *pred, like(*pred, gp));
            }
        }
    }
}

fn children(op: &Op) -> Vec<Var> {
    match op {
        Op::Constant | Op::Input | Op::Param(_) => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
            vec![*a, *b]
        }
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Softplus(a)
        | Op::SoftmaxRows(a)
        | Op::MeanRows(a)
        | Op::Sum(a)
        | Op::SumSquares(a)
        | Op::NormalizeColumns(a)
        | Op::CenterColumns(a) => vec![*a],
        Op::LayerNorm { x, gain, bias } => vec![*x, *gain, *bias],
        Op::GatherRows { table, .. } => vec![*table],
        Op::ScatterAddRows { x, .. } | Op::SliceRows { x, .. } => vec![*x],
        Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
        Op::BarlowTwins { c, .. } => vec![*c],
        Op::Mse { pred, .. } => vec![*pred],
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<Option<usize>>,
    n_params: usize,
}

impl Gradients {
    /// Gradient with respect to a node, `None` if it was not reached or does
    /// not require gradients.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param_grads(&self) -> ParamGrads {
        let mut out = ParamGrads::empty(self.n_params);
        for (node, p) in self.params.iter().enumerate() {
            if let (Some(p), Some(g)) = (p, &self.grads[node]) {
                out.add(*p, g);
            }
        }
        out
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
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn normalize_row(row: &[f64]) -> (Vec<f64>, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    (row.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

fn column_norms(t: &Tensor) -> Vec<f64> {
    let c = t.cols();
    let mut sq = vec![0.0; c];
    for (k, v) in t.data().iter().enumerate() {
        sq[k % c] += v * v;
    }
    sq.into_iter().map(f64::sqrt).collect()
}

/// The two parts of the Barlow Twins objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarlowTerms {
    pub diagonal: f64,
    /// Off-diagonal sum of squares, before weighting by lambda.
    pub off_diagonal: f64,
    pub lambda: f64,
}

impl BarlowTerms {
    pub fn total(&self) -> f64 {
        self.diagonal + self.lambda * self.off_diagonal
    }
}

pub fn barlow_twins_terms(c: &Tensor, lambda: f64) -> BarlowTerms {
    let n = c.cols();
    let mut diagonal = 0.0;
    let mut off_diagonal = 0.0;
    for i in 0..c.rows() {
        for j in 0..n {
            let v = c.get(i, j);
            if i == j {
                diagonal += (1.0 - v) * (1.0 - v);
            } else {
                off_diagonal += v * v;
            }
        }
    }
    BarlowTerms { diagonal, off_diagonal, lambda }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_gives_ones_and_square_gives_two_w() {
        let mut store = ParamStore::new();
        store.insert("w", t(&[vec![1.0, -2.0], vec![0.5, 3.0]])).unwrap();
        let mut g = Graph::new(&store);
        let w = g.param("w").unwrap();
        let s = g.sum(w);
        let grads = g.backward(s).unwrap().param_grads();
        assert_eq!(grads.get(0).unwrap().data(), &[1.0; 4]);

        let mut g = Graph::new(&store);
        let w = g.param("w").unwrap();
        let s = g.sum_squares(w);
        let grads = g.backward(s).unwrap().param_grads();
        assert_eq!(grads.get(0).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn unreached_params_are_none() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0)).unwrap();
        store.insert("b", Tensor::scalar(2.0)).unwrap();
        let mut g = Graph::new(&store);
        let a = g.param("a").unwrap();
        let s = g.sum_squares(a);
        let grads = g.backward(s).unwrap().param_grads();
        assert!(grads.get(1).is_none());
        assert_eq!(grads.dense(&store, "b").unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::standalone();
        let x = g.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::standalone();
        let x = g.constant(t(&[vec![0.0, 3f64.ln()], vec![2.0, 2.0]]));
        let y = g.softmax_rows(x, None).unwrap();
        let y = g.value(y);
        assert!((y.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((y.get(0, 1) - 0.75).abs() < 1e-15);
        assert_eq!(y.row(1), &[0.5, 0.5]);

        let x = g.constant(t(&[vec![700.0, 701.0, 699.5]]));
        let y = g.softmax_rows(x, None).unwrap();
        assert!(g.value(y).is_finite());
        assert!((g.value(y).sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_mask() {
        let mut g = Graph::standalone();
        let x = g.constant(t(&[vec![1.0, 5.0, 2.0]]));
        let y = g.softmax_rows(x, Some(&[false, true, false])).unwrap();
        assert_eq!(g.value(y).get(0, 1), 0.0);
        assert!((g.value(y).sum() - 1.0).abs() < 1e-15);
        assert!(matches!(
            g.softmax_rows(x, Some(&[true, true, true])),
            Err(Error::AllMasked(_))
        ));
    }

    #[test]
    fn layer_norm_closed_forms() {
        let mut g = Graph::standalone();
        let x = g.constant(t(&[vec![3.0, 3.0, 3.0], vec![1.0, -1.0, 0.0]]));
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).row(0), &[0.0, 0.0, 0.0]);

        let x = g.constant(t(&[vec![1.0, -1.0]]));
        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let row = g.value(y).row(0);
        assert!((row[0] - 1.0).abs() < 1e-5 && (row[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn scatter_is_order_independent() {
        let vals = [1e16, 1.0, -1e16, 1.0, 3.0];
        let mut g = Graph::standalone();
        let a = g.constant(Tensor::matrix(5, 1, vals.to_vec()).unwrap());
        let sa = g.scatter_add_rows(a, &[0; 5], 1).unwrap();
        let mut rev = vals.to_vec();
        rev.reverse();
        let b = g.constant(Tensor::matrix(5, 1, rev).unwrap());
        let sb = g.scatter_add_rows(b, &[0; 5], 1).unwrap();
        assert_eq!(g.value(sa).data(), g.value(sb).data());
    }

    #[test]
    fn degenerate_column_is_reported() {
        let mut g = Graph::standalone();
        let z = g.constant(t(&[vec![1.0, 0.0], vec![2.0, 0.0]]));
        assert!(matches!(
            g.normalize_columns(z),
            Err(Error::DegenerateColumn { column: 1, .. })
        ));
    }

    #[test]
    fn barlow_terms() {
        assert_eq!(barlow_twins_terms(&Tensor::identity(4), 0.0051).total(), 0.0);
        assert_eq!(barlow_twins_terms(&Tensor::zeros(&[3, 3]), 0.0051).total(), 3.0);
    }
}
