//! Dense 2-D tensors and a tape-based reverse-mode differentiator.
//!
//! A [`Graph`] is built per example: parameters enter as cached leaves, each
//! operation appends a node, and [`Graph::backward`] walks the tape in reverse
//! accumulating gradients. Gradients for parameters come back aligned with
//! [`ParamStore`] order.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::rng::named_rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    Length { shape: Vec<usize>, len: usize },
    #[error("non-finite value in tensor")]
    NonFinite,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
}

/// Row-major 2-D array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]{:?}", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if rows * cols != data.len() {
            return Err(TensorError::Length {
                shape: vec![rows, cols],
                len: data.len(),
            });
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Like [`Tensor::new`] but also rejects NaN and infinities.
    pub fn checked(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite);
        }
        Self::new(rows, cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![x],
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self · other`.
    fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor {
            rows: m,
            cols: n,
            data: out,
        }
    }

    /// `self · otherᵀ`.
    fn matmul_nt(&self, other: &Tensor) -> Tensor {
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Tensor {
            rows: m,
            cols: n,
            data: out,
        }
    }

    /// `selfᵀ · other`.
    fn matmul_tn(&self, other: &Tensor) -> Tensor {
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let brow = &other.data[p * n..(p + 1) * n];
            for i in 0..m {
                let a = self.data[p * m + i];
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor {
            rows: m,
            cols: n,
            data: out,
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = &mut out.data[r * x.cols..(r + 1) * x.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = &mut out.data[r * x.cols..(r + 1) * x.cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sparse linear map over the columns of each row: `out[j] = Σ w · x[i]`
/// for `(i, w)` in `terms[j]`. Used for picking, summing and scattering.
pub type ColumnMap = Vec<Vec<(usize, f64)>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddConst(Var),
    ScaleBy(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    Gather(Var, Vec<usize>),
    ColumnMap(Var, ColumnMap),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    MaxConst(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording tape for one forward pass over a read-only [`ParamStore`].
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf for the named parameter; repeated calls return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var, TensorError> {
        let idx = self
            .store
            .index(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        Ok(self.param_at(idx))
    }

    pub fn param_at(&mut self, idx: usize) -> Var {
        if let Some(v) = self.param_vars[idx] {
            return v;
        }
        let v = self.push(self.store.tensor_at(idx).clone(), Op::Param);
        self.param_vars[idx] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols != y.rows {
            return Err(shape_err("matmul", x, y));
        }
        let out = x.matmul(y);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols != y.cols {
            return Err(shape_err("matmul_nt", x, y));
        }
        let out = x.matmul_nt(y);
        Ok(self.push(out, Op::MatMulNT(a, b)))
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(name, x, y));
        }
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        let out = Tensor {
            rows: x.rows,
            cols: x.cols,
            data,
        };
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Elementwise product with a constant tensor (masks, fixed weights).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var, TensorError> {
        let x = self.value(a);
        if x.shape() != c.shape() {
            return Err(shape_err("mul_const", x, &c));
        }
        let data = x.data.iter().zip(&c.data).map(|(p, q)| p * q).collect();
        let out = Tensor {
            rows: x.rows,
            cols: x.cols,
            data,
        };
        Ok(self.push(out, Op::MulConst(a, c)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, Op::AddConst(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_const(n, 1.0)
    }

    /// Multiply every element of `a` by the 1x1 tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let (x, k) = (self.value(a), self.value(s));
        if k.data.len() != 1 {
            return Err(shape_err("scale_by", x, k));
        }
        let k = k.data[0];
        let out = x.map(|v| v * k);
        Ok(self.push(out, Op::ScaleBy(a, s)))
    }

    /// Concatenate along columns; all inputs must have equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let rows = self.value(parts[0]).rows;
        let mut cols = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            cols += t.cols;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatCols(parts.to_vec())))
    }

    /// Stack along rows; all inputs must have equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let cols = self.value(parts[0]).cols;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let t = self.value(*p);
            if t.cols != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec())))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let t = self.value(a);
        assert!(r < t.rows, "row {r} out of range for {:?}", t.shape());
        let out = Tensor::row(t.row_slice(r).to_vec());
        self.push(out, Op::Row(a, r))
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols);
        for &i in ids {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor {
            rows: ids.len(),
            cols: t.cols,
            data,
        };
        self.push(out, Op::Gather(table, ids.to_vec()))
    }

    pub fn column_map(&mut self, a: Var, map: ColumnMap) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(x.rows, map.len());
        for r in 0..x.rows {
            let xr = x.row_slice(r);
            for (j, terms) in map.iter().enumerate() {
                out.data[r * map.len() + j] = terms.iter().map(|&(i, w)| w * xr[i]).sum();
            }
        }
        self.push(out, Op::ColumnMap(a, map))
    }

    /// Select columns of `a` in the given order.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Var {
        self.column_map(a, cols.iter().map(|&c| vec![(c, 1.0)]).collect())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        self.push(out, Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.data.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Elementwise `max(a, k)`; the hinge clamp.
    pub fn max_const(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x.max(k));
        self.push(out, Op::MaxConst(a, k))
    }

    /// Reverse pass from a scalar loss. Returns one gradient per parameter in
    /// store order (zeros for parameters that were never read).
    pub fn backward(&self, loss: Var) -> Result<Vec<Tensor>, TensorError> {
        let lv = self.value(loss);
        if lv.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul_nt(y));
                    acc(&mut grads, *b, x.matmul_tn(&g));
                }
                Op::MatMulNT(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul(y));
                    acc(&mut grads, *b, g.matmul_tn(x));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let ga = zip_map(&g, y, |p, q| p * q);
                    let gb = zip_map(&g, x, |p, q| p * q);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, zip_map(&g, c, |p, q| p * q)),
                Op::Scale(a, k) => acc(&mut grads, *a, g.map(|x| x * k)),
                Op::AddConst(a) => acc(&mut grads, *a, g),
                Op::ScaleBy(a, s) => {
                    let k = self.value(*s).data[0];
                    let x = self.value(*a);
                    let gs: f64 = g.data.iter().zip(&x.data).map(|(p, q)| p * q).sum();
                    acc(&mut grads, *s, Tensor::scalar(gs));
                    acc(&mut grads, *a, g.map(|v| v * k));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.value(*p).cols;
                        let mut gp = Tensor::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            gp.data[r * pc..(r + 1) * pc].copy_from_slice(&g.row_slice(r)[offset..offset + pc]);
                        }
                        offset += pc;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let t = self.value(*p);
                        let n = t.data.len();
                        let gp = Tensor {
                            rows: t.rows,
                            cols: t.cols,
                            data: g.data[offset..offset + n].to_vec(),
                        };
                        offset += n;
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::Row(a, r) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    ga.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(&g.data);
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(table, ids) => {
                    let t = self.value(*table);
                    let mut gt = Tensor::zeros(t.rows, t.cols);
                    for (k, &i) in ids.iter().enumerate() {
                        for c in 0..t.cols {
                            gt.data[i * t.cols + c] += g.data[k * t.cols + c];
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::ColumnMap(a, map) => {
                    let x = self.value(*a);
                    let mut ga = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        for (j, terms) in map.iter().enumerate() {
                            let gj = g.data[r * map.len() + j];
                            for &(i, w) in terms {
                                ga.data[r * x.cols + i] += w * gj;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => acc(&mut grads, *a, zip_map(&g, out, |p, y| p * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(&mut grads, *a, zip_map(&g, out, |p, y| p * y * (1.0 - y))),
                Op::Exp(a) => acc(&mut grads, *a, zip_map(&g, out, |p, y| p * y)),
                Op::Log(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, zip_map(&g, x, |p, q| p / q));
                }
                Op::Softmax(a) => {
                    let mut ga = Tensor::zeros(out.rows, out.cols);
                    for r in 0..out.rows {
                        let y = out.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..out.cols {
                            ga.data[r * out.cols + c] = y[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let mut ga = Tensor::zeros(out.rows, out.cols);
                    for r in 0..out.rows {
                        let y = out.row_slice(r);
                        let gr = g.row_slice(r);
                        let total: f64 = gr.iter().sum();
                        for c in 0..out.cols {
                            ga.data[r * out.cols + c] = gr[c] - y[c].exp() * total;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    let k = g.data[0];
                    acc(&mut grads, *a, x.map(|_| k));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let k = g.data[0] / x.data.len() as f64;
                    acc(&mut grads, *a, x.map(|_| k));
                }
                Op::MaxConst(a, k) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, zip_map(&g, x, |p, q| if q > *k { p } else { 0.0 }));
                }
            }
        }

        let mut out = Vec::with_capacity(self.store.len());
        for (i, pv) in self.param_vars.iter().enumerate() {
            let t = self.store.tensor_at(i);
            let g = pv
                .and_then(|v| grads.get_mut(v.0).and_then(Option::take))
                .unwrap_or_else(|| Tensor::zeros(t.rows, t.cols));
            out.push(g);
        }
        Ok(out)
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(p, q)| f(*p, *q)).collect(),
    }
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<(), TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(())
    }

    /// Add a parameter drawn uniformly from (-0.1, 0.1) by a generator keyed
    /// on the store seed and the parameter name.
    pub fn init_uniform(&mut self, name: &str, rows: usize, cols: usize) -> Result<(), TensorError> {
        let mut rng = named_rng(self.seed, &format!("init/{name}"));
        let data = (0..rows * cols).map(|_| rng.gen_range(-0.1..0.1)).collect();
        self.insert(name, Tensor::new(rows, cols, data)?)
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index(name).map(move |i| &mut self.tensors[i])
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Round every value to the nearest `f32`, the precision checkpoints keep.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(TensorError::Shape {
            op: "adam_step",
            lhs: vec![store.len()],
            rhs: vec![grads.len()],
        });
    }
    for (t, g) in store.tensors.iter().zip(grads) {
        if t.shape() != g.shape() {
            return Err(shape_err("adam_step", t, g));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, (t, g)) in store.tensors.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..t.data.len() {
            let gk = g.data[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            t.data[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for x in &mut g.data {
                *x *= k;
            }
        }
    }
    norm
}
