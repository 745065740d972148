//! Dense row-major matrices and the small-matrix SVD used by the
//! condition-number loss.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration: columns of a working
//! copy are rotated pairwise until mutually orthogonal, at which point their
//! norms are the singular values. It is accurate to working precision for the
//! 2×2 and C×C joint-distribution matrices this crate factors; nothing here
//! targets large inputs.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense `rows × cols` matrix of `f64`, row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    ///
    /// Panics on ragged input; intended for literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
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

    pub fn is_vector(&self) -> bool {
        self.rows == 1 || self.cols == 1
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        self.map(|v| v * factor)
    }

    /// `self += factor * other`; shapes must agree.
    pub fn axpy(&mut self, factor: f64, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

/// Default relative threshold below which a singular value counts as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-9;

/// Jacobi sweeps stop once every column pair has
/// `|a_i·a_j| <= OFF_DIAGONAL_TOL * |a_i||a_j|`.
const OFF_DIAGONAL_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Thin SVD `A = U · diag(σ) · Vᵀ` with `k = min(m, n)` components.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// Non-increasing, non-negative.
    pub singular_values: Vec<f64>,
    /// `m × k`, orthonormal columns.
    pub left_vectors: Matrix,
    /// `n × k`, orthonormal columns.
    pub right_vectors: Matrix,
    /// Count of σ_i with σ_i > rank_tol · σ_1.
    pub numerical_rank: usize,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let (m, k) = self.left_vectors.shape();
        let n = self.right_vectors.rows();
        let mut out = Matrix::zeros(m, n);
        for c in 0..k {
            let s = self.singular_values[c];
            for i in 0..m {
                let us = self.left_vectors[(i, c)] * s;
                for j in 0..n {
                    out[(i, j)] += us * self.right_vectors[(j, c)];
                }
            }
        }
        out
    }

    /// σ_1 / σ_r over the non-zero singular values. `None` for a zero matrix.
    pub fn condition_number(&self) -> Option<f64> {
        if self.numerical_rank == 0 {
            return None;
        }
        Some(self.singular_values[0] / self.singular_values[self.numerical_rank - 1])
    }
}

/// One-sided Jacobi SVD of a small dense matrix.
pub fn svd_small(a: &Matrix, rank_tol: f64) -> Result<SvdResult> {
    if !a.all_finite() {
        return Err(Error::Numeric("svd input has non-finite entries".into()));
    }
    if a.is_empty() {
        return Err(Error::shape("svd_small", "empty matrix"));
    }
    // Work on the tall orientation; A = W Σ Vᵀ  <=>  Aᵀ = V Σ Wᵀ.
    let transposed = a.rows() < a.cols();
    let mut work = if transposed { a.transpose() } else { a.clone() };
    let (m, n) = work.shape();
    let mut v = Matrix::identity(n);

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..m {
                    let (wi, wj) = (work[(r, i)], work[(r, j)]);
                    alpha += wi * wi;
                    beta += wj * wj;
                    gamma += wi * wj;
                }
                if gamma == 0.0 || gamma.abs() <= OFF_DIAGONAL_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut work, i, j, c, s);
                rotate_columns(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|r| work[(r, j)].powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let sigma_max = norms[order[0]];
    let mut singular_values = Vec::with_capacity(n);
    let mut left = Matrix::zeros(m, n);
    let mut right = Matrix::zeros(n, n);
    let mut missing = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        singular_values.push(sigma);
        for r in 0..n {
            right[(r, dst)] = v[(r, src)];
        }
        if sigma > 0.0 && sigma > 1e-13 * sigma_max {
            for r in 0..m {
                left[(r, dst)] = work[(r, src)] / sigma;
            }
        } else {
            missing.push(dst);
        }
    }
    complete_orthonormal_columns(&mut left, &missing);

    let numerical_rank = if sigma_max > 0.0 {
        singular_values
            .iter()
            .filter(|&&s| s > rank_tol * sigma_max)
            .count()
    } else {
        0
    };

    let (left_vectors, right_vectors) = if transposed {
        (right, left)
    } else {
        (left, right)
    };
    Ok(SvdResult {
        singular_values,
        left_vectors,
        right_vectors,
        numerical_rank,
    })
}

fn rotate_columns(m: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..m.rows() {
        let (a, b) = (m[(r, i)], m[(r, j)]);
        m[(r, i)] = c * a - s * b;
        m[(r, j)] = s * a + c * b;
    }
}

/// Fills the listed columns with unit vectors orthogonal to every other
/// column (Gram-Schmidt against the standard basis).
fn complete_orthonormal_columns(q: &mut Matrix, missing: &[usize]) {
    let (m, k) = q.shape();
    let mut filled: Vec<bool> = (0..k).map(|c| !missing.contains(&c)).collect();
    for &col in missing {
        let mut best: Option<Vec<f64>> = None;
        let mut best_norm = 0.0;
        for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            for _ in 0..2 {
                for other in (0..k).filter(|&c| filled[c]) {
                    let dot: f64 = (0..m).map(|r| cand[r] * q[(r, other)]).sum();
                    for (r, c) in cand.iter_mut().enumerate() {
                        *c -= dot * q[(r, other)];
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > best_norm {
                best_norm = norm;
                best = Some(cand);
            }
        }
        let cand = best.expect("m >= k guarantees a complement");
        for r in 0..m {
            q[(r, col)] = cand[r] / best_norm;
        }
        filled[col] = true;
    }
}

/// `|det(a)|` as the product of singular values.
pub fn abs_det(a: &Matrix) -> Result<f64> {
    if a.rows() != a.cols() {
        return Err(Error::shape("abs_det", format!("{:?} is not square", a.shape())));
    }
    let svd = svd_small(a, DEFAULT_RANK_TOL)?;
    Ok(svd.singular_values.iter().product())
}
