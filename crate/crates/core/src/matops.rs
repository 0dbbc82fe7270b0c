//! Small dense square matrices.
//!
//! Everything here targets the tiny matrices that appear in flow-map
//! sensitivity work (n = 2..4, occasionally up to a few dozen). Storage is a
//! flat row-major `Vec<f64>`. The [`kernels`] submodule holds allocation-free
//! slice routines used inside the integrator loops.

use std::fmt;
use std::ops::{Index, IndexMut, Mul};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when accepting a matrix as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Default ceiling on the condition number accepted by [`invert`].
pub const DEFAULT_MAX_CONDITION: f64 = 1e12;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-14;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Matrix { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major entries. `data.len()` must be a perfect
    /// square.
    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() != n * n {
            return Err(Error::invalid(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                data.len()
            )));
        }
        Ok(Matrix { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("matrix needs at least one row"));
        }
        let mut data = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid(format!("row {i} has {} entries, expected {n}", row.len())));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { n, data })
    }

    /// Outer product `w wᵀ`.
    pub fn outer(w: &[f64]) -> Self {
        let n = w.len();
        let mut m = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = w[i] * w[j];
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
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

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Matrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scaled(&self, c: f64) -> Self {
        Matrix {
            n: self.n,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Self {
        assert_eq!(self.n, other.n, "dimension mismatch");
        Matrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Self {
        assert_eq!(self.n, other.n, "dimension mismatch");
        Matrix {
            n: self.n,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.n, v.len(), "dimension mismatch");
        self.data
            .chunks(self.n)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `A X Aᵀ`, symmetrized.
    pub fn congruence(&self, x: &Matrix) -> Matrix {
        let mut out = self * &(x * &self.transpose());
        out.symmetrize();
        out
    }

    /// Replaces the matrix with `(A + Aᵀ)/2`.
    pub fn symmetrize(&mut self) {
        let n = self.n;
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = avg;
                self.data[j * n + i] = avg;
            }
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Determinant by partially pivoted elimination.
    pub fn determinant(&self) -> f64 {
        let n = self.n;
        let mut a = self.data.clone();
        let mut det = 1.0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&r, &s| a[r * n + col].abs().total_cmp(&a[s * n + col].abs()))
                .unwrap();
            if a[pivot * n + col] == 0.0 {
                return 0.0;
            }
            if pivot != col {
                for k in 0..n {
                    a.swap(col * n + k, pivot * n + k);
                }
                det = -det;
            }
            let p = a[col * n + col];
            det *= p;
            for r in (col + 1)..n {
                let f = a[r * n + col] / p;
                for k in col..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
            }
        }
        det
    }

    /// Largest relative asymmetry `max |a_ij - a_ji| / max(1, max |a|)`.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

impl Mul for &Matrix {
    type Output = Matrix;

    fn mul(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.n, rhs.n, "dimension mismatch");
        let mut out = Matrix::zeros(self.n);
        kernels::mat_mul(self.n, &self.data, &rhs.data, &mut out.data);
        out
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.data.chunks(self.n)).finish()
    }
}

/// A symmetric positive-definite matrix, symmetrized on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdMatrix(Matrix);

impl SpdMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::invalid("matrix has non-finite entries"));
        }
        let asym = m.asymmetry();
        if asym > SYMMETRY_TOL {
            return Err(Error::invalid(format!("matrix is not symmetric (relative asymmetry {asym:e})")));
        }
        let mut m = m;
        m.symmetrize();
        cholesky_symmetric(&m)?;
        Ok(SpdMatrix(m))
    }

    pub fn identity(n: usize) -> Self {
        SpdMatrix(Matrix::identity(n))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    /// Lower-triangular Cholesky factor.
    pub fn cholesky(&self) -> Matrix {
        cholesky_symmetric(&self.0).expect("validated at construction")
    }
}

/// Largest singular value, `sqrt(λ_max(AᵀA))`.
pub fn operator_norm(a: &Matrix) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::invalid("operator norm of a matrix with non-finite entries"));
    }
    let ata = &a.transpose() * a;
    let eig = sym_eig(&ata)?;
    Ok(eig.values[0].max(0.0).sqrt())
}

/// Lower-triangular `L` with `L Lᵀ = xi`. The input is symmetrized first and
/// rejected if its asymmetry exceeds [`SYMMETRY_TOL`].
pub fn cholesky(xi: &Matrix) -> Result<Matrix> {
    if !xi.is_finite() {
        return Err(Error::invalid("Cholesky of a matrix with non-finite entries"));
    }
    let asym = xi.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::invalid(format!(
            "Cholesky input is not symmetric (relative asymmetry {asym:e})"
        )));
    }
    let mut s = xi.clone();
    s.symmetrize();
    cholesky_symmetric(&s)
}

fn cholesky_symmetric(a: &Matrix) -> Result<Matrix> {
    let n = a.dim();
    let scale = a.max_abs();
    let pivot_tol = scale * f64::EPSILON * n as f64;
    let mut l = Matrix::zeros(n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > pivot_tol) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Eigen-decomposition of a symmetric matrix: values in descending order and
/// the matching unit eigenvectors stored as columns.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymEig {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        let n = self.vectors.dim();
        (0..n).map(|i| self.vectors[(i, k)]).collect()
    }

    /// `V diag(values) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.vectors.dim();
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = (0..n).map(|k| self.vectors[(i, k)] * self.values[k] * self.vectors[(j, k)]).sum();
            }
        }
        out.symmetrize();
        out
    }
}

/// Cyclic Jacobi eigensolver. The input is symmetrized before iterating.
pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    if !a.is_finite() {
        return Err(Error::invalid("eigen-decomposition of a non-finite matrix"));
    }
    let n = a.dim();
    let mut m = a.clone();
    m.symmetrize();
    let mut v = Matrix::identity(n);
    let stop = JACOBI_TOL * m.frobenius_norm();

    let off_norm = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * m[(i, j)] * m[(i, j)];
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&m) <= stop;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
        converged = off_norm(&m) <= stop;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    Ok(SymEig { values, vectors })
}

/// Inverse with a condition-number guard (`cond = ‖A‖·‖A⁻¹‖`).
pub fn invert(a: &Matrix) -> Result<Matrix> {
    invert_with_limit(a, DEFAULT_MAX_CONDITION)
}

pub fn invert_with_limit(a: &Matrix, max_condition: f64) -> Result<Matrix> {
    if !a.is_finite() {
        return Err(Error::invalid("inverse of a matrix with non-finite entries"));
    }
    let n = a.dim();
    let mut inv = Matrix::zeros(n);
    let mut work = a.as_slice().to_vec();
    if !kernels::invert(n, &mut work, inv.as_mut_slice()) {
        return Err(Error::Singular { condition: f64::INFINITY });
    }
    let condition = operator_norm(a)? * operator_norm(&inv)?;
    if !condition.is_finite() || condition > max_condition {
        return Err(Error::Singular { condition });
    }
    Ok(inv)
}

/// Projects a nearly PSD symmetric matrix onto the PSD cone. Eigenvalues in
/// `[-tol·max(1, ‖A‖), 0)` are set to zero; anything more negative is an
/// error. The matrix is returned unchanged when no clamping is needed.
pub fn clamp_psd(a: &Matrix, tol: f64) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    let scale = eig.values.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let min = *eig.values.last().unwrap();
    if min >= 0.0 {
        let mut out = a.clone();
        out.symmetrize();
        return Ok(out);
    }
    if min < -tol * scale {
        return Err(Error::NotSemidefinite { eigenvalue: min });
    }
    let clamped = SymEig {
        values: eig.values.iter().map(|v| v.max(0.0)).collect(),
        vectors: eig.vectors,
    };
    Ok(clamped.reconstruct())
}

/// Allocation-free row-major kernels over `n×n` slices.
pub mod kernels {
    /// `out = a b`
    #[inline]
    pub fn mat_mul(n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += a[i * n + k] * b[k * n + j];
                }
                out[i * n + j] = s;
            }
        }
    }

    /// `out = a bᵀ`
    #[inline]
    pub fn mat_mul_bt(n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += a[i * n + k] * b[j * n + k];
                }
                out[i * n + j] = s;
            }
        }
    }

    /// `out = a v`
    #[inline]
    pub fn mat_vec(n: usize, a: &[f64], v: &[f64], out: &mut [f64]) {
        for i in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i * n + k] * v[k];
            }
            out[i] = s;
        }
    }

    /// Gauss-Jordan inverse with partial pivoting. `work` holds the input
    /// and is destroyed. Returns false on an exactly zero pivot.
    pub fn invert(n: usize, work: &mut [f64], out: &mut [f64]) -> bool {
        out.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            out[i * n + i] = 1.0;
        }
        for col in 0..n {
            let mut pivot = col;
            for r in (col + 1)..n {
                if work[r * n + col].abs() > work[pivot * n + col].abs() {
                    pivot = r;
                }
            }
            let p = work[pivot * n + col];
            if p == 0.0 || !p.is_finite() {
                return false;
            }
            if pivot != col {
                for k in 0..n {
                    work.swap(col * n + k, pivot * n + k);
                    out.swap(col * n + k, pivot * n + k);
                }
            }
            let inv_p = 1.0 / p;
            for k in 0..n {
                work[col * n + k] *= inv_p;
                out[col * n + k] *= inv_p;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = work[r * n + col];
                if f == 0.0 {
                    continue;
                }
                for k in 0..n {
                    work[r * n + k] -= f * work[col * n + k];
                    out[r * n + k] -= f * out[col * n + k];
                }
            }
        }
        true
    }
}
