//! Dense row-major matrices and the symmetric routines built on them:
//! cyclic Jacobi eigendecomposition, PSD matrix powers and PCA.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is {rows}x{cols}, expected a square matrix")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric: |A[{i}][{j}] - A[{j}][{i}]| = {gap:e}")]
    NotSymmetric { i: usize, j: usize, gap: f64 },
    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off:e})")]
    NoConvergence { sweeps: usize, off: f64 },
    #[error("eigenvalue {value:e} is negative beyond the PSD tolerance")]
    NegativeEigenvalue { value: f64 },
    #[error("matrix is singular: cannot take a negative power (smallest shifted eigenvalue {value:e})")]
    Singular { value: f64 },
    #[error("unsupported matrix power {0}; expected 1/2 or -1/2")]
    UnsupportedPower(f64),
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_diag(diag: &[T]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major storage. Panics if the length is wrong.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major buffer has the wrong length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                let rrow = rhs.row(k);
                let orow = out.row_mut(i);
                for (o, &b) in orow.iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · x` for a column vector `x`.
    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.cols, x.len(), "mul_vec shape mismatch");
        (0..self.rows).map(|i| crate::scalar::dot(self.row(i), x)).collect()
    }

    /// `x · self` for a row vector `x`.
    pub fn vec_mul(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.rows, x.len(), "vec_mul shape mismatch");
        let mut out = vec![T::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += xi * a;
            }
        }
        out
    }

    pub fn scale(&self, s: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| v * s).collect() }
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect();
        Self { rows: self.rows, cols: self.cols, data }
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gauss-Jordan inverse with partial pivoting.
    pub fn inverse(&self) -> Result<Self, LinalgError> {
        if !self.is_square() {
            return Err(LinalgError::NotSquare { rows: self.rows, cols: self.cols });
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = Self::identity(n);
        let tiny = T::epsilon() * T::one().max(self.max_abs()) * T::of_usize(n);
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| a[(i, col)].abs().partial_cmp(&a[(j, col)].abs()).expect("finite"))
                .expect("nonempty range");
            if !(a[(pivot, col)].abs() > tiny) {
                return Err(LinalgError::Singular { value: a[(pivot, col)].abs().to_f64_lossy() });
            }
            if pivot != col {
                for j in 0..n {
                    a.data.swap(pivot * n + j, col * n + j);
                    inv.data.swap(pivot * n + j, col * n + j);
                }
            }
            let p = a[(col, col)];
            for j in 0..n {
                a[(col, j)] /= p;
                inv[(col, j)] /= p;
            }
            for i in 0..n {
                if i == col {
                    continue;
                }
                let f = a[(i, col)];
                if f == T::zero() {
                    continue;
                }
                for j in 0..n {
                    let (av, iv) = (a[(col, j)], inv[(col, j)]);
                    a[(i, j)] -= f * av;
                    inv[(i, j)] -= f * iv;
                }
            }
        }
        Ok(inv)
    }

    fn check_symmetric(&self, tol: T) -> Result<(), LinalgError> {
        if !self.is_square() {
            return Err(LinalgError::NotSquare { rows: self.rows, cols: self.cols });
        }
        let scale = T::one().max(self.max_abs());
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let gap = (self[(i, j)] - self[(j, i)]).abs();
                if gap > tol * scale {
                    return Err(LinalgError::NotSymmetric { i, j, gap: gap.to_f64_lossy() });
                }
            }
        }
        Ok(())
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigendecomposition of a symmetric matrix, `A = Q Λ Qᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEig<T> {
    /// Sorted descending.
    pub eigenvalues: Vec<T>,
    /// Orthonormal eigenvectors stored as columns, aligned with `eigenvalues`.
    pub eigenvectors: Matrix<T>,
}

impl<T: Scalar> SymEig<T> {
    /// `Q f(Λ) Qᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        let n = self.eigenvalues.len();
        let q = &self.eigenvectors;
        let mut out = Matrix::zeros(n, n);
        for (k, &lam) in self.eigenvalues.iter().enumerate() {
            let fl = f(lam);
            if fl == T::zero() {
                continue;
            }
            for i in 0..n {
                let qik = q[(i, k)] * fl;
                for j in 0..n {
                    out[(i, j)] += qik * q[(j, k)];
                }
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix<T> {
        self.reconstruct_with(|l| l)
    }
}

pub const SYMMETRY_TOL: f64 = 1e-10;
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Eigenvalues in `[-PSD_TOL, 0)` are treated as zero.
pub const PSD_TOL: f64 = 1e-8;

/// Full symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Converges when the off-diagonal Frobenius norm drops below
/// `JACOBI_TOL · ‖A‖_F` (or the scalar type's resolution, whichever is
/// coarser). Eigenpairs come back sorted by descending eigenvalue.
pub fn sym_eig<T: Scalar>(a: &Matrix<T>) -> Result<SymEig<T>, LinalgError> {
    let sym_tol = T::of(SYMMETRY_TOL).max(T::epsilon() * T::of(64.0));
    a.check_symmetric(sym_tol)?;
    let n = a.rows();
    let mut m = a.clone();
    // symmetrize exactly so rotations see a symmetric input
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = (m[(i, j)] + m[(j, i)]) / T::of(2.0);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let mut q = Matrix::identity(n);
    let total = a.frobenius();
    let tol = T::of(JACOBI_TOL).max(T::epsilon() * T::of(4.0)) * total;

    let off_norm = |m: &Matrix<T>| {
        let mut s = T::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                s += m[(i, j)] * m[(i, j)];
            }
        }
        (s + s).sqrt()
    };

    let mut converged = n < 2 || total == T::zero();
    let mut sweeps = 0;
    while !converged && sweeps < JACOBI_MAX_SWEEPS {
        if off_norm(&m) <= tol {
            converged = true;
            break;
        }
        sweeps += 1;
        for p in 0..n - 1 {
            for r in (p + 1)..n {
                let apr = m[(p, r)];
                if apr == T::zero() {
                    continue;
                }
                let app = m[(p, p)];
                let arr = m[(r, r)];
                let theta = (arr - app) / (T::of(2.0) * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let t = if theta == T::zero() { T::one() } else { t };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkr = m[(k, r)];
                    m[(k, p)] = c * mkp - s * mkr;
                    m[(k, r)] = s * mkp + c * mkr;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mrk = m[(r, k)];
                    m[(p, k)] = c * mpk - s * mrk;
                    m[(r, k)] = s * mpk + c * mrk;
                }
                m[(p, r)] = T::zero();
                m[(r, p)] = T::zero();
                for k in 0..n {
                    let qkp = q[(k, p)];
                    let qkr = q[(k, r)];
                    q[(k, p)] = c * qkp - s * qkr;
                    q[(k, r)] = s * qkp + c * qkr;
                }
            }
        }
    }
    if !converged && off_norm(&m) > tol {
        return Err(LinalgError::NoConvergence {
            sweeps,
            off: off_norm(&m).to_f64_lossy(),
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap_or(std::cmp::Ordering::Equal));
    let eigenvalues = order.iter().map(|&i| m[(i, i)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            eigenvectors[(k, dst)] = q[(k, src)];
        }
    }
    Ok(SymEig { eigenvalues, eigenvectors })
}

/// The two matrix powers the pipelines need.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Power {
    Sqrt,
    InvSqrt,
}

/// `Q (Λ + eps)^p Qᵀ` for a symmetric PSD matrix.
pub fn psd_power<T: Scalar>(a: &Matrix<T>, p: Power, eps: T) -> Result<Matrix<T>, LinalgError> {
    let eig = sym_eig(a)?;
    psd_power_from_eig(&eig, p, eps)
}

pub fn psd_power_from_eig<T: Scalar>(eig: &SymEig<T>, p: Power, eps: T) -> Result<Matrix<T>, LinalgError> {
    let psd_tol = T::of(PSD_TOL);
    let mut shifted = Vec::with_capacity(eig.eigenvalues.len());
    for &lam in &eig.eigenvalues {
        if lam < -psd_tol {
            return Err(LinalgError::NegativeEigenvalue { value: lam.to_f64_lossy() });
        }
        shifted.push(lam.max(T::zero()) + eps);
    }
    if p == Power::InvSqrt {
        if let Some(&min) = shifted.iter().min_by(|a, b| a.partial_cmp(b).unwrap()) {
            if min <= T::zero() {
                return Err(LinalgError::Singular { value: min.to_f64_lossy() });
            }
        }
    }
    let scaled = SymEig { eigenvalues: shifted, eigenvectors: eig.eigenvectors.clone() };
    Ok(match p {
        Power::Sqrt => scaled.reconstruct_with(|l| l.sqrt()),
        Power::InvSqrt => scaled.reconstruct_with(|l| T::one() / l.sqrt()),
    })
}

/// Column means of a row matrix.
pub fn column_means<T: Scalar>(rows: &[&[T]]) -> Vec<T> {
    let dim = rows.first().map_or(0, |r| r.len());
    let mut mean = vec![T::zero(); dim];
    for r in rows {
        for (m, &v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    let n = T::of_usize(rows.len().max(1));
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Sample covariance (1/(N-1) normalization) and mean of a set of rows.
pub fn covariance<T: Scalar>(rows: &[&[T]]) -> Result<(Vec<T>, Matrix<T>), LinalgError> {
    if rows.len() < 2 {
        return Err(LinalgError::TooFewRows { needed: 2, got: rows.len() });
    }
    let dim = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(LinalgError::DimensionMismatch { expected: dim, got: bad.len() });
    }
    let mean = column_means(rows);
    let mut cov = Matrix::zeros(dim, dim);
    let mut centered = vec![T::zero(); dim];
    for r in rows {
        for ((c, &v), &m) in centered.iter_mut().zip(r.iter()).zip(&mean) {
            *c = v - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            for j in i..dim {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    let denom = T::of_usize(rows.len() - 1);
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mean, cov))
}

/// Principal component fit: the mean and the eigendecomposition of the
/// sample covariance, components descending by variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaFit<T> {
    pub mean: Vec<T>,
    pub eig: SymEig<T>,
}

pub fn pca_fit<T: Scalar>(rows: &[&[T]]) -> Result<PcaFit<T>, LinalgError> {
    let (mean, cov) = covariance(rows)?;
    let eig = sym_eig(&cov)?;
    Ok(PcaFit { mean, eig })
}
