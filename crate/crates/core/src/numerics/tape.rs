//! Reverse-mode differentiation over a small fixed set of matrix primitives.
//!
//! Values are computed eagerly as operations are recorded. `backward` walks the
//! record in reverse and accumulates one gradient per parameter leaf.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::ops::{gelu, gelu_grad, log_sum_exp, normalize};
use crate::numerics::{Gradients, Matrix, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Allowed key indices for each query row, in CSR form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowPattern {
    offsets: Vec<usize>,
    keys: Vec<usize>,
    key_count: usize,
}

impl RowPattern {
    pub fn from_rows(rows: &[Vec<usize>], key_count: usize) -> Result<Self> {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for (i, row) in rows.iter().enumerate() {
            if row.is_empty() {
                return Err(Error::EmptyAttentionRow);
            }
            if let Some(&bad) = row.iter().find(|&&k| k >= key_count) {
                return Err(Error::OutOfRange(format!("row {i} key {bad} >= {key_count}")));
            }
            keys.extend_from_slice(row);
            offsets.push(keys.len());
        }
        Ok(Self { offsets, keys, key_count })
    }

    /// Every query sees every key.
    pub fn dense(query_count: usize, key_count: usize) -> Self {
        let keys: Vec<usize> = (0..query_count).flat_map(|_| 0..key_count).collect();
        let offsets = (0..=query_count).map(|i| i * key_count).collect();
        Self { offsets, keys, key_count }
    }

    pub fn query_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn key_count(&self) -> usize {
        self.key_count
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.keys[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Total number of allowed (query, key) pairs.
    pub fn nnz(&self) -> usize {
        self.keys.len()
    }
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Square(Var),
    MaskedSoftmax { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    GatherRows { x: Var, rows: Vec<usize> },
    ReplaceRows { x: Var, rows: Vec<usize>, fill: Var },
    Attention { q: Var, k: Var, v: Var, pattern: Arc<RowPattern>, heads: usize, probs: Vec<f64> },
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    RowDot(Var, Var),
    ConcatCols(Vec<Var>),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Matrix },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_count: usize,
}

const NORM_FLOOR: f64 = 1e-12;

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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf for a trainable parameter. Repeated calls return the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.param_count = self.param_count.max(store.len());
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("mul {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let value = Matrix::from_vec(
            va.rows(),
            va.cols(),
            va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
        )?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds a 1×C row to every row of an R×C matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::Shape(format!("add_row {:?} + {:?}", va.shape(), vr.shape())));
        }
        let mut value = va.clone();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(value, Op::Gelu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a))
    }

    /// Row-wise softmax over positions where `allowed` (row-major, same shape) is true.
    pub fn masked_softmax(&mut self, x: Var, allowed: Arc<Vec<bool>>) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        if allowed.len() != rows * cols {
            return Err(Error::Shape("masked_softmax mask size".into()));
        }
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let p = crate::numerics::softmax_masked(vx.row(i), &allowed[i * cols..(i + 1) * cols])?;
            value.row_mut(i).copy_from_slice(&p);
        }
        Ok(self.push(value, Op::MaskedSoftmax { x }))
    }

    /// Row-wise layer normalization with 1×C gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        if self.shape(gain) != (1, cols) || self.shape(bias) != (1, cols) {
            return Err(Error::Shape("layer_norm gain/bias".into()));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let (h, s) = normalize(vx.row(i), eps);
            for j in 0..cols {
                value.set(i, j, g[j] * h[j] + b[j]);
            }
            xhat.row_mut(i).copy_from_slice(&h);
            inv_std.push(s);
        }
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= vx.rows()) {
            return Err(Error::OutOfRange(format!("gather row {bad} of {}", vx.rows())));
        }
        let value = vx.select_rows(rows);
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Copy of `x` with the listed rows overwritten by the 1×C `fill` row.
    pub fn replace_rows(&mut self, x: Var, rows: &[usize], fill: Var) -> Result<Var> {
        let vx = self.value(x);
        if self.shape(fill) != (1, vx.cols()) {
            return Err(Error::Shape("replace_rows fill".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= vx.rows()) {
            return Err(Error::OutOfRange(format!("replace row {bad} of {}", vx.rows())));
        }
        let mut value = vx.clone();
        let f = self.value(fill).data().to_vec();
        for &r in rows {
            value.row_mut(r).copy_from_slice(&f);
        }
        let mut rows = rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        Ok(self.push(value, Op::ReplaceRows { x, rows, fill }))
    }

    /// Multi-head scaled dot-product attention restricted to `pattern`.
    ///
    /// Head `h` uses columns `h*d..(h+1)*d` of q, k and v, with `d = D / heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, pattern: Arc<RowPattern>, heads: usize) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let dim = vq.cols();
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Shape(format!("{dim} columns over {heads} heads")));
        }
        if vk.cols() != dim || vv.cols() != dim || vk.rows() != vv.rows() {
            return Err(Error::Shape("attention q/k/v".into()));
        }
        if pattern.query_count() != vq.rows() || pattern.key_count() != vk.rows() {
            return Err(Error::Shape(format!(
                "pattern {}x{} for {} queries and {} keys",
                pattern.query_count(),
                pattern.key_count(),
                vq.rows(),
                vk.rows()
            )));
        }
        let d = dim / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let nnz = pattern.nnz();
        let mut probs = vec![0.0; heads * nnz];
        let mut value = Matrix::zeros(vq.rows(), dim);
        for i in 0..vq.rows() {
            let keys = pattern.row(i);
            let start = pattern.offsets[i];
            for h in 0..heads {
                let cols = h * d..(h + 1) * d;
                let qi = &vq.row(i)[cols.clone()];
                let p = &mut probs[h * nnz + start..h * nnz + start + keys.len()];
                for (slot, &j) in p.iter_mut().zip(keys) {
                    *slot = crate::numerics::dot(qi, &vk.row(j)[cols.clone()]) * scale;
                }
                crate::numerics::ops::softmax_in_place(p);
                let out = &mut value.row_mut(i)[cols.clone()];
                for (&pj, &j) in p.iter().zip(keys) {
                    for (o, &x) in out.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *o += pj * x;
                    }
                }
            }
        }
        Ok(self.push(value, Op::Attention { q, k, v, pattern, heads, probs }))
    }

    /// Column means as a 1×C row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.rows() as f64;
        let mut value = Matrix::zeros(1, vx.cols());
        for i in 0..vx.rows() {
            for (o, &a) in value.data_mut().iter_mut().zip(vx.row(i)) {
                *o += a;
            }
        }
        let value = value.scale(1.0 / n);
        self.push(value, Op::MeanRows(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(x).sum());
        self.push(value, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let value = Matrix::filled(1, 1, vx.sum() / vx.len() as f64);
        self.push(value, Op::MeanAll(x))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut value = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows());
        for i in 0..vx.rows() {
            let n = crate::numerics::l2_norm(vx.row(i)).max(NORM_FLOOR);
            for a in value.row_mut(i) {
                *a /= n;
            }
            norms.push(n);
        }
        self.push(value, Op::L2NormalizeRows { x, norms })
    }

    /// Per-row inner products as an R×1 column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape("row_dot".into()));
        }
        let value = Matrix::from_fn(va.rows(), 1, |i, _| crate::numerics::dot(va.row(i), vb.row(i)));
        Ok(self.push(value, Op::RowDot(a, b)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::Shape("concat_cols row counts".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut c = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                value.row_mut(i)[c..c + src.len()].copy_from_slice(src);
                c += src.len();
            }
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Mean softmax cross-entropy of each row of `logits` against its label.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if labels.len() != vl.rows() || labels.iter().any(|&l| l >= vl.cols()) {
            return Err(Error::Shape("cross_entropy labels".into()));
        }
        let mut probs = vl.clone();
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            total += log_sum_exp(vl.row(i)) - vl.get(i, label);
            crate::numerics::ops::softmax_in_place(probs.row_mut(i));
        }
        let value = Matrix::filled(1, 1, total / labels.len() as f64);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Reverse pass from a 1×1 output. Gradients are accumulated in tape order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::new(self.param_count);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.set(*id, g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    let gb = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = elementwise(&g, self.value(*b), |x, y| x * y);
                    let gb = elementwise(&g, self.value(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, &x) in gr.data_mut().iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Gelu(a) => {
                    let ga = elementwise(&g, self.value(*a), |x, y| x * gelu_grad(y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = elementwise(&g, self.value(*a), |x, y| 2.0 * x * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::MaskedSoftmax { x } => {
                    let p = &node.value;
                    let mut gx = Matrix::zeros(p.rows(), p.cols());
                    for i in 0..p.rows() {
                        let inner = crate::numerics::dot(p.row(i), g.row(i));
                        for j in 0..p.cols() {
                            gx.set(i, j, p.get(i, j) * (g.get(i, j) - inner));
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let (rows, cols) = xhat.shape();
                    let gvals = self.value(*gain).data();
                    let mut gx = Matrix::zeros(rows, cols);
                    let mut ggain = Matrix::zeros(1, cols);
                    let mut gbias = Matrix::zeros(1, cols);
                    let n = cols as f64;
                    for (i, &inv) in inv_std.iter().enumerate().take(rows) {
                        let dy = g.row(i);
                        let h = xhat.row(i);
                        let dh: Vec<f64> = dy.iter().zip(gvals).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h = crate::numerics::dot(&dh, h);
                        for j in 0..cols {
                            gx.set(i, j, inv / n * (n * dh[j] - sum_dh - h[j] * sum_dh_h));
                            ggain.data_mut()[j] += dy[j] * h[j];
                            gbias.data_mut()[j] += dy[j];
                        }
                    }
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *bias, gbias);
                    accumulate(&mut grads, *x, gx);
                }
                Op::GatherRows { x, rows } => {
                    let src = self.value(*x);
                    let mut gx = Matrix::zeros(src.rows(), src.cols());
                    for (r, &i) in rows.iter().enumerate() {
                        for (o, &a) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += a;
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ReplaceRows { x, rows, fill } => {
                    let mut gx = g.clone();
                    let mut gf = Matrix::zeros(1, g.cols());
                    for &r in rows {
                        for (o, &a) in gf.data_mut().iter_mut().zip(g.row(r)) {
                            *o += a;
                        }
                        gx.row_mut(r).fill(0.0);
                    }
                    accumulate(&mut grads, *fill, gf);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Attention { q, k, v, pattern, heads, probs } => {
                    let (gq, gk, gv) = attention_backward(
                        &g,
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        pattern,
                        *heads,
                        probs,
                    );
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
                Op::MeanRows(x) => {
                    let (rows, cols) = self.shape(*x);
                    let s = 1.0 / rows as f64;
                    let gx = Matrix::from_fn(rows, cols, |_, j| g.data()[j] * s);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SumAll(x) => {
                    let (rows, cols) = self.shape(*x);
                    accumulate(&mut grads, *x, Matrix::filled(rows, cols, g.data()[0]));
                }
                Op::MeanAll(x) => {
                    let (rows, cols) = self.shape(*x);
                    let s = g.data()[0] / (rows * cols) as f64;
                    accumulate(&mut grads, *x, Matrix::filled(rows, cols, s));
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for (i, &norm) in norms.iter().enumerate().take(y.rows()) {
                        let inner = crate::numerics::dot(y.row(i), g.row(i));
                        for j in 0..y.cols() {
                            gx.set(i, j, (g.get(i, j) - y.get(i, j) * inner) / norm);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowDot(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let ga = Matrix::from_fn(va.rows(), va.cols(), |i, j| g.get(i, 0) * vb.get(i, j));
                    let gb = Matrix::from_fn(va.rows(), va.cols(), |i, j| g.get(i, 0) * va.get(i, j));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let gp = Matrix::from_fn(rows, cols, |i, j| g.get(i, c + j));
                        c += cols;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let s = g.data()[0] / labels.len() as f64;
                    let mut gl = probs.clone();
                    for (i, &label) in labels.iter().enumerate() {
                        let x = gl.get(i, label);
                        gl.set(i, label, x - 1.0);
                    }
                    accumulate(&mut grads, *logits, gl.scale(s));
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn elementwise(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), |i, j| f(a.get(i, j), b.get(i, j)))
}

fn attention_backward(
    g: &Matrix,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    pattern: &RowPattern,
    heads: usize,
    probs: &[f64],
) -> (Matrix, Matrix, Matrix) {
    let dim = q.cols();
    let d = dim / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let nnz = pattern.nnz();
    let mut gq = Matrix::zeros(q.rows(), dim);
    let mut gk = Matrix::zeros(k.rows(), dim);
    let mut gv = Matrix::zeros(v.rows(), dim);
    let mut dp = Vec::new();
    for i in 0..q.rows() {
        let keys = pattern.row(i);
        let start = pattern.offsets[i];
        for h in 0..heads {
            let cols = h * d..(h + 1) * d;
            let p = &probs[h * nnz + start..h * nnz + start + keys.len()];
            let go = &g.row(i)[cols.clone()];
            dp.clear();
            for (&pj, &j) in p.iter().zip(keys) {
                for (a, &b) in gv.row_mut(j)[cols.clone()].iter_mut().zip(go) {
                    *a += pj * b;
                }
                dp.push(crate::numerics::dot(go, &v.row(j)[cols.clone()]));
            }
            let inner = crate::numerics::dot(p, &dp);
            for ((&pj, &dpj), &j) in p.iter().zip(&dp).zip(keys) {
                let ds = pj * (dpj - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &k.row(j)[cols.clone()];
                for (a, &b) in gq.row_mut(i)[cols.clone()].iter_mut().zip(kj) {
                    *a += ds * b;
                }
                let qi = &q.row(i)[cols.clone()];
                for (a, &b) in gk.row_mut(j)[cols.clone()].iter_mut().zip(qi) {
                    *a += ds * b;
                }
            }
        }
    }
    (gq, gk, gv)
}
