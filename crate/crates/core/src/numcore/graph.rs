//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the tape; node indices are a valid
//! topological order, so `backward` is one reverse sweep.

use std::rc::Rc;

use crate::error::{dim_err, Error, Result};

use super::ops::{self, gelu_grad_scalar, gelu_scalar};
use super::tensor::{check_matrix, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Boolean attention mask, `true` where attending is allowed.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(dim_err!("mask of {}×{} given {} entries", rows, cols, allowed.len()));
        }
        Ok(Mask { rows, cols, allowed })
    }

    /// Position `i` may attend to `j` iff `j <= i`.
    pub fn causal(len: usize) -> Self {
        let allowed = (0..len * len).map(|k| k % len <= k / len).collect();
        Mask {
            rows: len,
            cols: len,
            allowed,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RowNorms(Var),
    SumAll(Var),
    Pick(Var, Vec<(usize, usize)>),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation tape over tensors of element type `T`.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Grad-enabled leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a grad-enabled leaf; `None` for constants and
    /// before the first `backward`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_matrix(self.value(a), "matmul_nt lhs")?;
        let (n, k2) = check_matrix(self.value(b), "matmul_nt rhs")?;
        if k != k2 {
            return Err(dim_err!(
                "matmul_nt inner extents differ: {:?} · {:?}ᵀ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data = ops::matmul_nt_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.value(a).dims2();
        if self.value(row).len() != cols {
            return Err(dim_err!(
                "add_row: {:?} cannot broadcast over {:?}",
                self.value(row).shape(),
                self.value(a).shape()
            ));
        }
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for chunk in value.data_mut().chunks_mut(cols.max(1)) {
            for (v, &b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu_scalar);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    /// Softmax over the last axis; masked-out entries get probability zero.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<Rc<Mask>>) -> Result<Var> {
        let x = self.value(a);
        if !x.all_finite() {
            return Err(Error::NumericDomain("softmax input is not finite".into()));
        }
        let (rows, cols) = x.dims2();
        if let Some(m) = &mask {
            if m.shape() != (rows, cols) {
                return Err(dim_err!(
                    "mask {:?} does not match scores {}×{}",
                    m.shape(),
                    rows,
                    cols
                ));
            }
        }
        let data = ops::softmax_rows_kernel(x.data(), rows, cols, mask.as_deref().map(|m| &m.allowed[..]));
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SoftmaxRows(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.all_finite() {
            return Err(Error::NumericDomain("log_softmax input is not finite".into()));
        }
        let (rows, cols) = x.dims2();
        let value = Tensor::new(x.shape().to_vec(), ops::log_softmax_rows_kernel(x.data(), rows, cols))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LogSoftmaxRows(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (value, normed, inv_std) =
            ops::layer_norm_parts(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let value = ops::conv1d(self.value(x), self.value(kernel), stride, padding)?;
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                kernel,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Embedding lookup: rows of `table` at `idx`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = t.dims2();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Data(format!("row index {} out of range for {} rows", i, rows)));
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![idx.len(), cols], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::GatherRows(table, idx.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(dim_err!("concat_rows width {} vs {}", v.cols(), cols));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Usage("concat_cols of nothing".into()))?;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(dim_err!("concat_cols row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        let (rows, cols) = v.dims2();
        if start + len > cols {
            return Err(dim_err!("column slice {}..{} out of range for {} columns", start, start + len, cols));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Euclidean norm of each row: `m×n -> [m]`.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (rows, _) = v.dims2();
        let data = (0..rows)
            .map(|r| v.row(r).iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let value = Tensor::from_vec(data);
        let rg = self.rg(&[a]);
        self.push(value, Op::RowNorms(a), rg)
    }

    /// Euclidean norm of the whole tensor.
    pub fn norm(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, vec![1, n])?;
        let rn = self.row_norms(flat);
        Ok(rn)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Selects individual `(row, col)` entries into a vector.
    pub fn pick(&mut self, a: Var, entries: &[(usize, usize)]) -> Result<Var> {
        let v = self.value(a);
        let (rows, cols) = v.dims2();
        let mut data = Vec::with_capacity(entries.len());
        for &(r, c) in entries {
            if r >= rows || c >= cols {
                return Err(dim_err!("pick ({}, {}) outside {}×{}", r, c, rows, cols));
            }
            data.push(v.at(r, c));
        }
        let value = Tensor::from_vec(data);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Pick(a, entries.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into the gradients of
    /// every grad-enabled leaf. Leaves the loss does not reach get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else {
                continue;
            };
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, adj: &mut [Option<Tensor<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let send = |v: Var, t: Tensor<T>, adj: &mut [Option<Tensor<T>>]| -> Result<()> {
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = av.dims2();
                let n = bv.cols();
                if wants(*a) {
                    let d = ops::matmul_nt_kernel(g.data(), bv.data(), m, n, k);
                    send(*a, Tensor::new(av.shape().to_vec(), d)?, adj)?;
                }
                if wants(*b) {
                    let d = ops::matmul_tn_kernel(av.data(), g.data(), m, k, n);
                    send(*b, Tensor::new(bv.shape().to_vec(), d)?, adj)?;
                }
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = av.dims2();
                let n = bv.rows();
                if wants(*a) {
                    let d = ops::matmul_kernel(g.data(), bv.data(), m, n, k);
                    send(*a, Tensor::new(av.shape().to_vec(), d)?, adj)?;
                }
                if wants(*b) {
                    let d = ops::matmul_tn_kernel(g.data(), av.data(), m, n, k);
                    send(*b, Tensor::new(bv.shape().to_vec(), d)?, adj)?;
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, g.clone(), adj)?;
                }
                if wants(*b) {
                    send(*b, g.clone(), adj)?;
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    send(*a, g.clone(), adj)?;
                }
                if wants(*b) {
                    send(*b, g.map(|x| -x), adj)?;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    send(*a, g.zip_map(bv, |x, y| x * y)?, adj)?;
                }
                if wants(*b) {
                    send(*b, g.zip_map(av, |x, y| x * y)?, adj)?;
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    send(*a, g.clone(), adj)?;
                }
                if wants(*row) {
                    let rv = &nodes[row.0].value;
                    let cols = rv.len();
                    let mut acc = vec![T::zero(); cols];
                    for chunk in g.data().chunks(cols.max(1)) {
                        for (s, &x) in acc.iter_mut().zip(chunk) {
                            *s += x;
                        }
                    }
                    send(*row, Tensor::new(rv.shape().to_vec(), acc)?, adj)?;
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                send(*a, g.map(|x| x * c), adj)?;
            }
            Op::Gelu(a) => {
                let d = g.zip_map(&nodes[a.0].value, |x, v| x * gelu_grad_scalar(v))?;
                send(*a, d, adj)?;
            }
            Op::SoftmaxRows(a) => {
                let (rows, cols) = out.dims2();
                let mut d = vec![T::zero(); out.len()];
                for r in 0..rows {
                    let y = out.row(r);
                    let gy = g.row(r);
                    let dot: T = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                    for c in 0..cols {
                        d[r * cols + c] = y[c] * (gy[c] - dot);
                    }
                }
                send(*a, Tensor::new(out.shape().to_vec(), d)?, adj)?;
            }
            Op::LogSoftmaxRows(a) => {
                let (rows, cols) = out.dims2();
                let mut d = vec![T::zero(); out.len()];
                for r in 0..rows {
                    let y = out.row(r);
                    let gy = g.row(r);
                    let total: T = gy.iter().copied().sum();
                    for c in 0..cols {
                        d[r * cols + c] = gy[c] - y[c].exp() * total;
                    }
                }
                send(*a, Tensor::new(out.shape().to_vec(), d)?, adj)?;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let xv = &nodes[x.0].value;
                let gv = &nodes[gain.0].value;
                let (rows, cols) = xv.dims2();
                if wants(*gain) {
                    let mut dg = vec![T::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += g.data()[r * cols + c] * normed[r * cols + c];
                        }
                    }
                    send(*gain, Tensor::new(gv.shape().to_vec(), dg)?, adj)?;
                }
                if wants(*bias) {
                    let mut db = vec![T::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g.data()[r * cols + c];
                        }
                    }
                    send(*bias, Tensor::new(nodes[bias.0].value.shape().to_vec(), db)?, adj)?;
                }
                if wants(*x) {
                    let n = T::from_f64(cols as f64);
                    let mut dx = vec![T::zero(); xv.len()];
                    let mut dz = vec![T::zero(); cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dz[c] = g.data()[r * cols + c] * gv.data()[c];
                        }
                        let z = &normed[r * cols..(r + 1) * cols];
                        let mean_dz = dz.iter().copied().sum::<T>() / n;
                        let mean_dz_z = dz.iter().zip(z).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for c in 0..cols {
                            dx[r * cols + c] = inv_std[r] * (dz[c] - mean_dz - z[c] * mean_dz_z);
                        }
                    }
                    send(*x, Tensor::new(xv.shape().to_vec(), dx)?, adj)?;
                }
            }
            Op::Conv1d {
                x,
                kernel,
                stride,
                padding,
            } => {
                let (xv, kv) = (&nodes[x.0].value, &nodes[kernel.0].value);
                let geom = ops::conv_geom(xv, kv, *stride, *padding)?;
                let (c_in, c_out) = (geom.c_in, geom.c_out);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                for t in 0..geom.t_out {
                    let grow = g.row(t);
                    for tap in 0..geom.k {
                        let Some(src) = ops::conv_src(t, tap, *stride, *padding, geom.t_in) else {
                            continue;
                        };
                        let xrow = xv.row(src);
                        for ci in 0..c_in {
                            let off = (tap * c_in + ci) * c_out;
                            let wrow = &kv.data()[off..off + c_out];
                            let mut acc = T::zero();
                            for (&gw, &w) in grow.iter().zip(wrow) {
                                acc += gw * w;
                            }
                            dx[src * c_in + ci] += acc;
                            let xval = xrow[ci];
                            for (d, &gw) in dk[off..off + c_out].iter_mut().zip(grow) {
                                *d += xval * gw;
                            }
                        }
                    }
                }
                if wants(*x) {
                    send(*x, Tensor::new(xv.shape().to_vec(), dx)?, adj)?;
                }
                if wants(*kernel) {
                    send(*kernel, Tensor::new(kv.shape().to_vec(), dk)?, adj)?;
                }
            }
            Op::GatherRows(table, idx) => {
                let tv = &nodes[table.0].value;
                let cols = tv.cols();
                let mut d = Tensor::zeros(tv.shape().to_vec());
                for (r, &i) in idx.iter().enumerate() {
                    for (dst, &s) in d.row_mut(i).iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                        *dst += s;
                    }
                }
                send(*table, d, adj)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = &nodes[p.0].value;
                    if wants(p) {
                        let d = g.data()[offset..offset + pv.len()].to_vec();
                        send(p, Tensor::new(pv.shape().to_vec(), d)?, adj)?;
                    }
                    offset += pv.len();
                }
            }
            Op::SliceRows(a, start) => {
                let av = &nodes[a.0].value;
                let cols = av.cols();
                let mut d = Tensor::zeros(av.shape().to_vec());
                d.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                send(*a, d, adj)?;
            }
            Op::ConcatCols(parts) => {
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let pv = &nodes[p.0].value;
                    let w = pv.cols();
                    if wants(p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        send(p, Tensor::new(pv.shape().to_vec(), d)?, adj)?;
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let av = &nodes[a.0].value;
                let w = out.cols();
                let mut d = Tensor::zeros(av.shape().to_vec());
                for r in 0..out.rows() {
                    d.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                send(*a, d, adj)?;
            }
            Op::RowNorms(a) => {
                let av = &nodes[a.0].value;
                let cols = av.cols();
                let mut d = vec![T::zero(); av.len()];
                for (r, &n) in out.data().iter().enumerate() {
                    if n > T::zero() {
                        let s = g.data()[r] / n;
                        for c in 0..cols {
                            d[r * cols + c] = s * av.data()[r * cols + c];
                        }
                    }
                }
                send(*a, Tensor::new(av.shape().to_vec(), d)?, adj)?;
            }
            Op::SumAll(a) => {
                let av = &nodes[a.0].value;
                send(*a, Tensor::full(av.shape().to_vec(), g.data()[0]), adj)?;
            }
            Op::Pick(a, entries) => {
                let av = &nodes[a.0].value;
                let cols = av.cols();
                let mut d = Tensor::zeros(av.shape().to_vec());
                for (k, &(r, c)) in entries.iter().enumerate() {
                    d.data_mut()[r * cols + c] += g.data()[k];
                }
                send(*a, d, adj)?;
            }
            Op::Reshape(a) => {
                let av = &nodes[a.0].value;
                send(*a, g.clone().reshape(av.shape().to_vec())?, adj)?;
            }
        }
        Ok(())
    }
}
