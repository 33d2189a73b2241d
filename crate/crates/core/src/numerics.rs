//! Dense row-major `f64` kernel: the handful of matrix operations the loss and
//! encoders need, plus a central-difference gradient checker.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data; rejects length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite matrix entry at flat index {pos}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Crate-internal constructor for data produced by finite arithmetic.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
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

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.rows, "row slice out of range");
        Self::from_raw(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    /// Top-left `rows x cols` block.
    pub fn block(&self, rows: usize, cols: usize) -> Self {
        assert!(rows <= self.rows && cols <= self.cols, "block out of range");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend_from_slice(&self.row(r)[..cols]);
        }
        Self::from_raw(rows, cols, data)
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::invalid(format!(
                "vstack column mismatch: {} vs {}",
                self.cols, other.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self::from_raw(self.rows + other.rows, self.cols, data))
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Four-lane accumulation; the summation order is fixed, so results are reproducible.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Standard product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::invalid(format!(
            "matmul dimension mismatch: {}x{} · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            // Sparse inputs (hashed features) are common; skipping exact zeros
            // leaves every sum bitwise unchanged.
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, i.e. all pairwise row dot products.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::invalid(format!(
            "matmul_bt dimension mismatch: {}x{} · ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a.row(i), b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`.
pub fn matmul_at(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::invalid(format!(
            "matmul_at dimension mismatch: ({}x{})ᵀ · {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let brow = b.row(r);
        for (k, &aval) in a.row(r).iter().enumerate() {
            if aval == 0.0 {
                continue;
            }
            let orow = &mut out.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aval * bv;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedRows {
    pub matrix: Matrix,
    /// Row norms before normalization.
    pub norms: Vec<f64>,
    /// `true` for rows that were exactly zero and were left unchanged.
    pub zero_rows: Vec<bool>,
}

impl NormalizedRows {
    pub fn has_zero_row(&self) -> bool {
        self.zero_rows.iter().any(|&z| z)
    }
}

pub fn l2_normalize_rows(m: &Matrix) -> NormalizedRows {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows);
    let mut zero_rows = Vec::with_capacity(m.rows);
    for r in 0..m.rows {
        let n = norm(m.row(r));
        norms.push(n);
        zero_rows.push(n == 0.0);
        if n > 0.0 {
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
    }
    NormalizedRows { matrix: out, norms, zero_rows }
}

/// Backward of `y = x / |x|` for one row: `(g − ŷ(ŷ·g)) / |x|`.
pub fn l2_normalize_backward(unit: &[f64], norm: f64, upstream: &[f64]) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; upstream.len()];
    }
    let proj = dot(unit, upstream);
    unit.iter().zip(upstream).map(|(u, g)| (g - u * proj) / norm).collect()
}

/// Sum in ascending order, so the result is independent of input order
/// (bitwise, not just up to rounding).
pub fn sum_sorted(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Row-wise softmax of `logits / temperature`, stabilized by subtracting the row max.
pub fn softmax_rows(logits: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    let mut out = logits.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.iter_mut().for_each(|v| *v = ((*v - max) / temperature).exp());
        let sum = sum_sorted(&mut row.to_vec());
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(out)
}

/// Mean over rows of `KL(target[i] ‖ probs[i])`, with `0·ln 0 = 0`.
pub fn kl_rows(target: &Matrix, probs: &Matrix) -> Result<f64> {
    if target.shape() != probs.shape() {
        return Err(Error::invalid(format!(
            "kl_rows shape mismatch: {:?} vs {:?}",
            target.shape(),
            probs.shape()
        )));
    }
    if target.rows == 0 {
        return Err(Error::invalid("kl_rows on empty matrix"));
    }
    // One sorted sum over all entries: invariant under row and column permutations.
    let mut terms = Vec::new();
    for r in 0..target.rows {
        for (c, (&y, &p)) in target.row(r).iter().zip(probs.row(r)).enumerate() {
            if y > 0.0 {
                if !(p > 0.0) {
                    return Err(Error::NumericDomain(format!(
                        "probability {p} at ({r},{c}) where target is {y}"
                    )));
                }
                terms.push(y * (y / p).ln());
            }
        }
    }
    Ok(sum_sorted(&mut terms) / target.rows as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// A named parameter block together with its analytic gradient.
#[derive(Debug, Clone)]
pub struct CheckedParam {
    pub name: String,
    pub value: Matrix,
    pub analytic: Matrix,
}

/// Compares analytic gradients against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every entry of every parameter block.
///
/// Relative error uses the denominator `max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(params: &[CheckedParam], epsilon: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&[Matrix]) -> f64 + Sync,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    for p in params {
        if p.value.shape() != p.analytic.shape() {
            return Err(Error::invalid(format!("gradient shape mismatch for {}", p.name)));
        }
    }
    let base: Vec<Matrix> = params.iter().map(|p| p.value.clone()).collect();
    let f0 = loss_fn(&base);
    let f1 = loss_fn(&base);
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::Verification(format!(
            "loss function is not deterministic: {f0} vs {f1}"
        )));
    }

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.value.data.len()).map(move |k| (pi, k)))
        .collect();
    let chunk = (coords.len() / (rayon::current_num_threads() * 4)).max(16);

    // (rel_error, coordinate position, analytic, numeric)
    let worst = coords
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, block)| {
            let mut local = base.clone();
            let mut worst = (0.0_f64, usize::MAX, 0.0, 0.0);
            for (off, &(pi, k)) in block.iter().enumerate() {
                let orig = local[pi].data[k];
                local[pi].data[k] = orig + epsilon;
                let plus = loss_fn(&local);
                local[pi].data[k] = orig - epsilon;
                let minus = loss_fn(&local);
                local[pi].data[k] = orig;
                let numeric = (plus - minus) / (2.0 * epsilon);
                let analytic = params[pi].analytic.data[k];
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                let rel = (analytic - numeric).abs() / denom;
                let pos = ci * chunk + off;
                if rel.is_nan() || rel > worst.0 || worst.1 == usize::MAX {
                    worst = (rel, pos, analytic, numeric);
                    if rel.is_nan() {
                        break;
                    }
                }
            }
            worst
        })
        .reduce(
            || (0.0, usize::MAX, 0.0, 0.0),
            |a, b| {
                if a.0.is_nan() || b.1 == usize::MAX {
                    a
                } else if b.0.is_nan() {
                    b
                } else if a.1 == usize::MAX || b.0 > a.0 || (b.0 == a.0 && b.1 < a.1) {
                    b
                } else {
                    a
                }
            },
        );

    if worst.0.is_nan() {
        return Err(Error::Verification("NaN in finite-difference comparison".into()));
    }
    let (worst_param, worst_index) = if worst.1 == usize::MAX {
        (String::new(), 0)
    } else {
        let (pi, k) = coords[worst.1];
        (params[pi].name.clone(), k)
    };
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_param,
        worst_index,
        analytic: worst.2,
        numeric: worst.3,
        checked: coords.len(),
    })
}
