//! Dense row-major matrices and the exact gradients of the fixed layer
//! vocabulary: affine maps, ReLU, and softmax cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Gathers the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor2) -> Result<()> {
        same_shape("add", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Tensor2) -> Result<f64> {
        same_shape("dot", self, other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            (self, false),
            (other, false),
            &mut out,
        );
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

fn same_shape(op: &str, a: &Tensor2, b: &Tensor2) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// `out = op(a) · op(b)` where `op` optionally transposes. `m, k, n` are the
/// logical dimensions after transposition.
fn gemm(m: usize, k: usize, n: usize, a: (&Tensor2, bool), b: (&Tensor2, bool), out: &mut Tensor2) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.data.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let strides = |t: &Tensor2, trans: bool| -> (isize, isize) {
        if trans {
            (1, t.cols as isize)
        } else {
            (t.cols as isize, 1)
        }
    };
    let (rsa, csa) = strides(a.0, a.1);
    let (rsb, csb) = strides(b.0, b.1);
    // SAFETY: the strides describe exactly the row-major buffers of `a`, `b`
    // and `out`, whose lengths match the logical m×k, k×n, m×n shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.data.as_ptr(),
            rsa,
            csa,
            b.0.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Gradients of one affine layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub dw: Tensor2,
    pub db: Vec<f64>,
    pub dx: Tensor2,
}

fn check_linear(x: &Tensor2, w: &Tensor2, b_len: usize) -> Result<()> {
    if x.cols != w.rows || w.cols != b_len {
        return Err(Error::Dimension(format!(
            "affine: input {}x{}, weight {}x{}, bias {}",
            x.rows, x.cols, w.rows, w.cols, b_len
        )));
    }
    Ok(())
}

/// `y = x·W + b`, bias broadcast over rows.
pub fn linear_forward(x: &Tensor2, w: &Tensor2, b: &[f64]) -> Result<Tensor2> {
    check_linear(x, w, b.len())?;
    let mut y = Tensor2::zeros(x.rows, w.cols);
    gemm(x.rows, x.cols, w.cols, (x, false), (w, false), &mut y);
    for r in 0..y.rows {
        for (v, bias) in y.row_mut(r).iter_mut().zip(b) {
            *v += bias;
        }
    }
    Ok(y)
}

/// `dW = xᵀ·dY`, `db = Σ_rows dY`, `dX = dY·Wᵀ`.
pub fn linear_backward(x: &Tensor2, w: &Tensor2, dy: &Tensor2) -> Result<LayerGrads> {
    check_linear(x, w, dy.cols)?;
    if dy.rows != x.rows {
        return Err(Error::Dimension(format!(
            "affine backward: input has {} rows, cotangent {}x{}",
            x.rows, dy.rows, dy.cols
        )));
    }
    let (dw, db) = linear_param_grads(x, dy);
    let dx = linear_input_grad(w, dy);
    Ok(LayerGrads { dw, db, dx })
}

/// Parameter half of [`linear_backward`]; shapes are assumed checked.
pub(crate) fn linear_param_grads(x: &Tensor2, dy: &Tensor2) -> (Tensor2, Vec<f64>) {
    let mut dw = Tensor2::zeros(x.cols, dy.cols);
    gemm(x.cols, x.rows, dy.cols, (x, true), (dy, false), &mut dw);
    let mut db = vec![0.0; dy.cols];
    for r in 0..dy.rows {
        for (acc, v) in db.iter_mut().zip(dy.row(r)) {
            *acc += v;
        }
    }
    (dw, db)
}

/// Input half of [`linear_backward`]; shapes are assumed checked.
pub(crate) fn linear_input_grad(w: &Tensor2, dy: &Tensor2) -> Tensor2 {
    let mut dx = Tensor2::zeros(dy.rows, w.rows);
    gemm(dy.rows, dy.cols, w.rows, (dy, false), (w, true), &mut dx);
    dx
}

// NaN passes through so divergence stays visible downstream.
fn relu_scalar(v: f64) -> f64 {
    if v <= 0.0 {
        0.0
    } else {
        v
    }
}

pub fn relu(x: &Tensor2) -> Tensor2 {
    x.map(relu_scalar)
}

pub(crate) fn relu_in_place(x: &mut Tensor2) {
    x.data.iter_mut().for_each(|v| *v = relu_scalar(*v));
}

/// Masks `dy` wherever the forward input was `≤ 0`.
pub fn relu_backward(x: &Tensor2, dy: &Tensor2) -> Result<Tensor2> {
    same_shape("relu backward", x, dy)?;
    let mut out = dy.clone();
    for (g, &z) in out.data.iter_mut().zip(&x.data) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    Ok(out)
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits. An empty batch has zero loss.
pub fn softmax_xent(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    let (b, c) = logits.shape();
    if labels.len() != b {
        return Err(Error::Dimension(format!(
            "{} labels for {b} logit rows",
            labels.len()
        )));
    }
    if c < 2 {
        return Err(Error::Input(format!(
            "softmax needs at least 2 classes, got {c}"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut grad = Tensor2::zeros(b, c);
    if b == 0 {
        return Ok((0.0, grad));
    }
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let g = grad.row_mut(r);
        let mut sum = 0.0;
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - max).exp();
            sum += *gi;
        }
        loss += sum.ln() - (row[y] - max);
        for gi in g.iter_mut() {
            *gi *= inv_b / sum;
        }
        g[y] -= inv_b;
    }
    Ok((loss * inv_b, grad))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
