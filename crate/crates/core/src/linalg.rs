//! Dense row-major matrices and a symmetric eigensolver.
//!
//! Everything here is 64-bit and allocation-simple: a matrix is a flat
//! `Vec<f64>` indexed as `i * cols + j`. The eigensolver is a cyclic Jacobi
//! iteration, chosen over a faster tridiagonal route because at the dims this
//! crate targets (dim <= 1024, typically 32) robustness and auditability beat
//! speed.

use crate::error::{Error, Result};

/// Relative tolerance for accepting a nearly-symmetric matrix.
const SYMMETRY_RTOL: f64 = 1e-12;

/// Jacobi stops once the off-diagonal norm falls below this times the input
/// Frobenius norm.
const JACOBI_RTOL: f64 = 1e-12;

/// Sweep cap; quadratic convergence makes this generous for dim <= 1024.
const JACOBI_MAX_SWEEPS: usize = 64;

// ─────────────────────────────── Matrix ────────────────────────────────

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
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

    /// Builds from a flat row-major buffer; `data.len()` must equal
    /// `rows * cols`.
    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "Matrix::from_flat",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds from row slices; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimensionMismatch {
                    context: "Matrix::from_rows",
                    expected: c,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                context: "Matrix::matmul",
                expected: self.cols,
                actual: other.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let lhs = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(lhs) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                context: "Matrix::matvec",
                expected: self.cols,
                actual: x.len(),
            });
        }
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = self.row(i);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Euclidean dot product; lengths must match (checked by caller).
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared Euclidean distance between two equal-length vectors.
#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ───────────────────────────── SymMatrix ───────────────────────────────

/// Square matrix with exact stored symmetry.
///
/// Construction accepts input symmetric to within `1e-12` relative to its
/// largest entry and stores the symmetrized average, so `get(i, j)` and
/// `get(j, i)` are always bit-identical. Entries must be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>, // row-major, dim * dim
}

impl SymMatrix {
    /// Validates and symmetrizes a square matrix.
    pub fn new(m: Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::DimensionMismatch {
                context: "SymMatrix::new",
                expected: m.rows(),
                actual: m.cols(),
            });
        }
        if !m.is_finite() {
            return Err(Error::InvalidInput(
                "symmetric matrix has non-finite entries".into(),
            ));
        }
        let n = m.rows();
        let tol = SYMMETRY_RTOL * m.max_abs().max(1.0);
        for i in 0..n {
            for j in (i + 1)..n {
                if (m.get(i, j) - m.get(j, i)).abs() > tol {
                    return Err(Error::InvalidInput(format!(
                        "asymmetric entry at ({i}, {j}): {} vs {}",
                        m.get(i, j),
                        m.get(j, i)
                    )));
                }
            }
        }
        let mut data = m.data;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (data[i * n + j] + data[j * n + i]);
                data[i * n + j] = avg;
                data[j * n + i] = avg;
            }
        }
        Ok(SymMatrix { dim: n, data })
    }

    /// Builds from `f(i, j)` evaluated once per unordered pair, giving exact
    /// symmetry by construction. `f` must return finite values.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "non-finite entry at ({i}, {j}): {v}"
                    )));
                }
                data[i * dim + j] = v;
                data[j * dim + i] = v;
            }
        }
        Ok(SymMatrix { dim, data })
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        SymMatrix { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    /// Adds `eps` to every diagonal entry in place.
    pub fn add_diagonal(&mut self, eps: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] += eps;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Applies the matrix to a vector.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "SymMatrix::matvec",
                expected: self.dim,
                actual: x.len(),
            });
        }
        let mut out = vec![0.0; self.dim];
        for i in 0..self.dim {
            let row = &self.data[i * self.dim..(i + 1) * self.dim];
            out[i] = dot(row, x);
        }
        Ok(out)
    }

    pub fn as_matrix(&self) -> Matrix {
        Matrix {
            rows: self.dim,
            cols: self.dim,
            data: self.data.clone(),
        }
    }
}

// ──────────────────────────── Eigensolver ──────────────────────────────

/// Result of a symmetric eigendecomposition `A = U diag(λ) Uᵀ`.
///
/// Eigenvalues are sorted descending; `basis` holds the matching eigenvectors
/// as columns, each flipped so its largest-magnitude entry is positive.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub basis: Matrix,
    pub eigenvalues: Vec<f64>,
    pub mean_eigenvalue: f64,
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Deterministic for a fixed input bit-pattern: no randomness, a fixed sweep
/// order, and a fixed tie-break (stable descending sort, first-index sign
/// pivot). Fails with [`Error::Convergence`] only if the sweep cap is hit.
pub fn eigh_sym(a: &SymMatrix) -> Result<EigenDecomposition> {
    let n = a.dim();
    if n == 0 {
        return Err(Error::InvalidInput("empty matrix".into()));
    }
    let norm = a.frobenius_norm();
    let tol = JACOBI_RTOL * norm;
    let mut m = a.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&m, n) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut m, &mut v, n, p, q);
            }
        }
        sweeps += 1;
    }
    if !converged && off_diagonal_norm(&m, n) > tol {
        return Err(Error::Convergence {
            sweeps,
            off_norm: off_diagonal_norm(&m, n),
        });
    }

    // Pair eigenvalues with their columns, sort descending (stable, so equal
    // eigenvalues keep Jacobi output order), then fix signs.
    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]));

    let mut basis = Matrix::zeros(n, n);
    let mut eigenvalues = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvalues.push(diag[src]);
        let mut col: Vec<f64> = (0..n).map(|r| v[r * n + src]).collect();
        fix_sign(&mut col);
        for (r, &val) in col.iter().enumerate() {
            basis.set(r, dst, val);
        }
    }
    let mean_eigenvalue = eigenvalues.iter().sum::<f64>() / n as f64;
    Ok(EigenDecomposition {
        basis,
        eigenvalues,
        mean_eigenvalue,
    })
}

fn off_diagonal_norm(m: &[f64], n: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let x = m[i * n + j];
            acc += 2.0 * x * x;
        }
    }
    acc.sqrt()
}

/// One Jacobi rotation zeroing `m[p][q]`, accumulated into `v`.
fn rotate(m: &mut [f64], v: &mut [f64], n: usize, p: usize, q: usize) {
    let apq = m[p * n + q];
    if apq == 0.0 {
        return;
    }
    let app = m[p * n + p];
    let aqq = m[q * n + q];
    let theta = (aqq - app) / (2.0 * apq);
    // t = sign(theta) / (|theta| + sqrt(theta^2 + 1)); hypot avoids overflow.
    let t = theta.signum() / (theta.abs() + theta.hypot(1.0));
    let c = 1.0 / t.hypot(1.0);
    let s = t * c;

    m[p * n + p] = app - t * apq;
    m[q * n + q] = aqq + t * apq;
    m[p * n + q] = 0.0;
    m[q * n + p] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = m[k * n + p];
        let akq = m[k * n + q];
        let np = c * akp - s * akq;
        let nq = s * akp + c * akq;
        m[k * n + p] = np;
        m[p * n + k] = np;
        m[k * n + q] = nq;
        m[q * n + k] = nq;
    }
    for k in 0..n {
        let vkp = v[k * n + p];
        let vkq = v[k * n + q];
        v[k * n + p] = c * vkp - s * vkq;
        v[k * n + q] = s * vkp + c * vkq;
    }
}

/// Flips a vector so its largest-magnitude entry (first such index on ties)
/// is nonnegative.
fn fix_sign(col: &mut [f64]) {
    let mut best = 0;
    for (i, v) in col.iter().enumerate() {
        if v.abs() > col[best].abs() {
            best = i;
        }
    }
    if col[best] < 0.0 {
        for v in col.iter_mut() {
            *v = -*v;
        }
    }
}

/// Computes `U diag(scales) Uᵀ` and symmetrizes the product explicitly, so
/// rounding cannot leak asymmetry into downstream consumers.
///
/// `u` must be square with `scales.len()` columns; scales must be finite.
pub fn sym_sandwich(u: &Matrix, scales: &[f64]) -> Result<SymMatrix> {
    let n = u.rows();
    if u.cols() != n {
        return Err(Error::DimensionMismatch {
            context: "sym_sandwich basis",
            expected: n,
            actual: u.cols(),
        });
    }
    if scales.len() != n {
        return Err(Error::DimensionMismatch {
            context: "sym_sandwich scales",
            expected: n,
            actual: scales.len(),
        });
    }
    if scales.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite scale".into()));
    }
    let mut raw = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for (k, &s) in scales.iter().enumerate() {
                acc += u.get(i, k) * s * u.get(j, k);
            }
            raw.set(i, j, acc);
        }
    }
    SymMatrix::from_fn(n, |i, j| 0.5 * (raw.get(i, j) + raw.get(j, i)))
}
