//! Dense symmetric matrices: construction, spectral queries by cyclic Jacobi
//! rotations, Loewner-order comparison and guarded inversion.
//!
//! Every matrix in the Riccati machinery (P, Λ, Q, R, G) is small (n ≤ 16)
//! and symmetric; products that are symmetric in exact arithmetic are
//! re-symmetrized on construction so drift does not accumulate over
//! thousands of backward steps.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::ops::{Add, Mul, Neg, Sub};

/// General dense real matrix.
pub type Mat = DMatrix<f64>;

pub const DEFAULT_ASYM_TOL: f64 = 1e-10;
pub const DEFAULT_COND_THRESHOLD: f64 = 1e12;

const JACOBI_MAX_SWEEPS: usize = 64;

/// A symmetric `dim × dim` real matrix. Symmetry is exact: `m[(i,j)] == m[(j,i)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    m: Mat,
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Columns are the unit eigenvectors matching `values`.
    pub vectors: Mat,
}

impl SymMatrix {
    /// Symmetrizes `raw` if its asymmetry is within `asym_tol`.
    pub fn make_symmetric(raw: &Mat, asym_tol: f64) -> Result<Self> {
        if !raw.is_square() || raw.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "expected a non-empty square matrix, got {}x{}",
                raw.nrows(),
                raw.ncols()
            )));
        }
        let max_asym = max_asymmetry(raw);
        if max_asym > asym_tol {
            return Err(Error::AsymmetryExceeded { max_asym, tol: asym_tol });
        }
        Ok(Self::symmetric_part(raw))
    }

    /// `(raw + rawᵀ)/2` with no tolerance check. Used for products that are
    /// symmetric in exact arithmetic.
    pub fn symmetric_part(raw: &Mat) -> Self {
        let n = raw.nrows();
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = raw[(i, i)];
            for j in (i + 1)..n {
                let v = 0.5 * (raw[(i, j)] + raw[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMatrix { m }
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix { m: Mat::zeros(dim, dim) }
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix { m: Mat::identity(dim, dim) }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix {
            m: Mat::from_diagonal(&DVector::from_column_slice(diag)),
        }
    }

    pub fn scalar(v: f64) -> Self {
        SymMatrix { m: Mat::from_element(1, 1, v) }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_mat(&self) -> &Mat {
        &self.m
    }

    pub fn into_mat(self) -> Mat {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    pub fn scale(&self, c: f64) -> Self {
        SymMatrix { m: &self.m * c }
    }

    /// `self + c·other`
    pub fn axpy(&self, c: f64, other: &SymMatrix) -> Self {
        SymMatrix { m: &self.m + &other.m * c }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.m.norm()
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|v| v.is_finite())
    }

    /// `xᵀ M x`
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.m * x))
    }

    /// `Tᵀ M T`, symmetrized.
    pub fn congruence(&self, t: &Mat) -> SymMatrix {
        SymMatrix::symmetric_part(&(t.transpose() * &self.m * t))
    }

    pub fn eigen(&self) -> SymEigen {
        jacobi_eigen(&self.m)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigen().values[0]
    }

    pub fn max_eigenvalue(&self) -> f64 {
        *self.eigen().values.last().expect("dim >= 1")
    }

    /// Clips eigenvalues in `(-psd_tol, 0)` to zero. Returns `None` when an
    /// eigenvalue is at or below `-psd_tol`.
    pub fn project_psd(&self, psd_tol: f64) -> Option<SymMatrix> {
        let eig = self.eigen();
        let min = eig.values[0];
        if min >= 0.0 {
            return Some(self.clone());
        }
        if min <= -psd_tol {
            return None;
        }
        let clipped: Vec<f64> = eig.values.iter().map(|v| v.max(0.0)).collect();
        Some(reassemble(&eig.vectors, &clipped))
    }
}

pub fn min_eigenvalue(m: &SymMatrix) -> f64 {
    m.min_eigenvalue()
}

/// `A ⪯ B` up to `tol`: true iff λ_min(B − A) ≥ −tol.
pub fn loewner_leq(a: &SymMatrix, b: &SymMatrix, tol: f64) -> Result<bool> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "loewner comparison of {}x{} and {}x{}",
            a.dim(),
            a.dim(),
            b.dim(),
            b.dim()
        )));
    }
    Ok((b - a).min_eigenvalue() >= -tol)
}

/// Inverse through the spectral decomposition.
///
/// Fails with `NearSingular` when the spectral condition number
/// `max|λ| / min|λ|` exceeds `cond_threshold` or an eigenvalue is exactly zero.
pub fn sym_inverse(m: &SymMatrix, cond_threshold: f64) -> Result<SymMatrix> {
    let eig = m.eigen();
    let (min_abs, max_abs) = eig
        .values
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
    if min_abs == 0.0 || !min_abs.is_finite() {
        return Err(Error::NearSingular {
            cond: f64::INFINITY,
            threshold: cond_threshold,
        });
    }
    let cond = max_abs / min_abs;
    if cond > cond_threshold {
        return Err(Error::NearSingular {
            cond,
            threshold: cond_threshold,
        });
    }
    let inv: Vec<f64> = eig.values.iter().map(|v| 1.0 / v).collect();
    Ok(reassemble(&eig.vectors, &inv))
}

fn reassemble(vectors: &Mat, values: &[f64]) -> SymMatrix {
    let n = vectors.nrows();
    let mut scaled = vectors.clone();
    for (j, &lam) in values.iter().enumerate() {
        for i in 0..n {
            scaled[(i, j)] *= lam;
        }
    }
    SymMatrix::symmetric_part(&(scaled * vectors.transpose()))
}

pub fn max_asymmetry(raw: &Mat) -> f64 {
    let n = raw.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((raw[(i, j)] - raw[(j, i)]).abs());
        }
    }
    worst
}

/// Cyclic Jacobi eigenvalue iteration for a symmetric matrix (only the
/// symmetric part of `a` is used). Eigenvalues are returned ascending.
pub fn jacobi_eigen(a: &Mat) -> SymEigen {
    let n = a.nrows();
    let mut a = SymMatrix::symmetric_part(a).m;
    let mut v = Mat::identity(n, n);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        let total = a.norm_squared();
        if off == 0.0 || off <= f64::EPSILON * f64::EPSILON * total {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &v.column(src));
    }
    SymEigen { values, vectors }
}

impl Add for &SymMatrix {
    type Output = SymMatrix;
    fn add(self, rhs: &SymMatrix) -> SymMatrix {
        SymMatrix { m: &self.m + &rhs.m }
    }
}

impl Sub for &SymMatrix {
    type Output = SymMatrix;
    fn sub(self, rhs: &SymMatrix) -> SymMatrix {
        SymMatrix { m: &self.m - &rhs.m }
    }
}

impl Mul<f64> for &SymMatrix {
    type Output = SymMatrix;
    fn mul(self, rhs: f64) -> SymMatrix {
        self.scale(rhs)
    }
}

impl Neg for &SymMatrix {
    type Output = SymMatrix;
    fn neg(self) -> SymMatrix {
        self.scale(-1.0)
    }
}
