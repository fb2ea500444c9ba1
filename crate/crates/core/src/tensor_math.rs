//! Dense vector and matrix helpers used throughout the crate.
//!
//! Everything here works on `f64`. Values only drop to `f32` at the feature
//! exchange boundary (see [`crate::wire`]).

use std::ops::{Deref, DerefMut};

use crate::error::{FclError, Result};

/// Norms below this are treated as zero by [`l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// A non-empty vector of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Vec64(Vec<f64>);

impl Vec64 {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(FclError::Degenerate("empty vector".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FclError::Numeric("vector entries".into()));
        }
        Ok(Vec64(data))
    }

    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "Vec64 must be non-empty");
        Vec64(vec![0.0; len])
    }

    /// Wraps data known to be finite and non-empty.
    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        debug_assert!(!data.is_empty());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Vec64(data)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl Deref for Vec64 {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vec64 {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl TryFrom<Vec<f64>> for Vec64 {
    type Error = FclError;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        Vec64::new(data)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat64 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FclError::dim("matrix data", rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FclError::Numeric("matrix entries".into()));
        }
        Ok(Mat64 { rows, cols, data })
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(FclError::dim("matvec", self.cols, x.len()));
        }
        Ok(self
            .data
            .chunks_exact(self.cols)
            .map(|row| dot_unchecked(row, x))
            .collect())
    }

    /// `selfᵀ · y`
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(FclError::dim("transposed matvec", self.rows, y.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (row, &yr) in self.data.chunks_exact(self.cols).zip(y) {
            axpy(yr, row, &mut out);
        }
        Ok(out)
    }

    /// Adds `alpha · u vᵀ` in place.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) -> Result<()> {
        if u.len() != self.rows {
            return Err(FclError::dim("outer product rows", self.rows, u.len()));
        }
        if v.len() != self.cols {
            return Err(FclError::dim("outer product cols", self.cols, v.len()));
        }
        for (row, &ur) in self.data.chunks_exact_mut(self.cols).zip(u) {
            axpy(alpha * ur, v, row);
        }
        Ok(())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FclError::dim("dot", a.len(), b.len()));
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(a: &[f64]) -> f64 {
    dot_unchecked(a, a).sqrt()
}

pub fn l2_normalize(a: &[f64]) -> Result<Vec64> {
    let n = norm(a);
    if !n.is_finite() {
        return Err(FclError::Numeric("l2_normalize input".into()));
    }
    if n <= MIN_NORM {
        return Err(FclError::Degenerate(format!(
            "cannot normalize vector with norm {n:e}"
        )));
    }
    Ok(Vec64::from_vec_unchecked(a.iter().map(|v| v / n).collect()))
}

/// Stable `log(Σ exp(xᵢ))`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log(exp(pos/τ) + Σ exp(negᵢ/τ))`, with max-subtraction so that large
/// similarities over a small temperature cannot overflow.
pub fn log_softmax_denominator(pos: f64, negs: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(FclError::Contract(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    let mut scaled = Vec::with_capacity(negs.len() + 1);
    scaled.push(pos / tau);
    scaled.extend(negs.iter().map(|n| n / tau));
    Ok(log_sum_exp(&scaled))
}

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn finite_difference_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(FclError::Contract(format!("step must be > 0, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(FclError::Numeric(format!("objective near coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}
