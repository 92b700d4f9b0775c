//! Dense kernels shared by every model: matrices, nonlinearities, the softmax
//! cross-entropy objective, RMSProp, gradient clipping and a central-difference
//! gradient checker.
//!
//! Everything runs in `f64` and reduces in a fixed sequential order, so the same
//! inputs always produce bit-identical outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `out += W[:, col_offset..col_offset + x.len()] · x`.
    ///
    /// Lets a single weight matrix act on a concatenated input without
    /// materializing the concatenation.
    pub fn gemv_acc(&self, col_offset: usize, x: &[f64], out: &mut [f64]) {
        debug_assert!(col_offset + x.len() <= self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.row(r)[col_offset..col_offset + x.len()];
            let mut s = 0.0;
            for (w, v) in row.iter().zip(x) {
                s += w * v;
            }
            *o += s;
        }
    }

    /// `out += W[:, col]`, the product with a one-hot vector.
    pub fn gather_col_acc(&self, col: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o += self.data[r * self.cols + col];
        }
    }

    /// `out += W[:, col_offset..col_offset + out.len()]ᵀ · d`.
    pub fn gemv_t_acc(&self, col_offset: usize, d: &[f64], out: &mut [f64]) {
        debug_assert_eq!(d.len(), self.rows);
        debug_assert!(col_offset + out.len() <= self.cols);
        for (r, &dr) in d.iter().enumerate() {
            if dr == 0.0 {
                continue;
            }
            let row = &self.row(r)[col_offset..col_offset + out.len()];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * dr;
            }
        }
    }

    /// `W[:, col_offset..] += d ⊗ x`.
    pub fn outer_acc(&mut self, col_offset: usize, d: &[f64], x: &[f64]) {
        debug_assert_eq!(d.len(), self.rows);
        debug_assert!(col_offset + x.len() <= self.cols);
        let cols = self.cols;
        for (r, &dr) in d.iter().enumerate() {
            if dr == 0.0 {
                continue;
            }
            let row = &mut self.data[r * cols + col_offset..r * cols + col_offset + x.len()];
            for (w, v) in row.iter_mut().zip(x) {
                *w += dr * v;
            }
        }
    }

    /// `W[:, col] += d`, the outer product with a one-hot vector.
    pub fn scatter_col_acc(&mut self, col: usize, d: &[f64]) {
        debug_assert_eq!(d.len(), self.rows);
        for (r, &dr) in d.iter().enumerate() {
            self.data[r * self.cols + col] += dr;
        }
    }
}

/// `W·x + b`.
pub fn affine(w: &Matrix, x: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if w.cols != x.len() {
        return Err(Error::shape("affine (W cols vs x)", w.cols, x.len()));
    }
    if w.rows != b.len() {
        return Err(Error::shape("affine (W rows vs b)", w.rows, b.len()));
    }
    let mut out = b.to_vec();
    w.gemv_acc(0, x, &mut out);
    Ok(out)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= sum);
    p
}

/// Cross-entropy of `softmax(logits)` against `target`, in nats, together with
/// the gradient with respect to the logits (`p - onehot(target)`).
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::IdOutOfRange {
            id: target,
            size: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    let loss = sum.ln() - (logits[target] - max);
    p.iter_mut().for_each(|x| *x /= sum);
    p[target] -= 1.0;
    Ok((loss, p))
}

/// Limits every entry to `[-c, c]`.
pub fn clip_elementwise(grad: &mut [f64], c: f64) {
    debug_assert!(c > 0.0);
    for g in grad.iter_mut() {
        *g = g.clamp(-c, c);
    }
}

/// RMSProp running average of squared gradients for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsPropState {
    pub cache: Vec<f64>,
    pub decay: f64,
    pub epsilon: f64,
}

impl RmsPropState {
    pub const DEFAULT_EPSILON: f64 = 1e-8;

    pub fn new(len: usize, decay: f64) -> Self {
        RmsPropState {
            cache: vec![0.0; len],
            decay,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    /// `cache ← decay·cache + (1−decay)·g²; param ← param − lr·g/(√cache + ε)`.
    pub fn step(&mut self, param: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if param.len() != grad.len() || param.len() != self.cache.len() {
            return Err(Error::shape(
                "rmsprop_step",
                param.len(),
                format!("grad {} / cache {}", grad.len(), self.cache.len()),
            ));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite gradient entry {} at index {i}",
                grad[i]
            )));
        }
        let d = self.decay;
        for ((p, &g), c) in param.iter_mut().zip(grad).zip(self.cache.iter_mut()) {
            *c = d * *c + (1.0 - d) * g * g;
            *p -= lr * g / (c.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Relative error used by [`grad_check`]: `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` around `point`.
/// Returns the largest relative error over all coordinates.
pub fn grad_check<F>(mut f: F, analytic: &[f64], point: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if analytic.len() != point.len() {
        return Err(Error::shape("grad_check", point.len(), analytic.len()));
    }
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
