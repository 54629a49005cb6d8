//! Dense double-precision kernels used by every other module: matrix-vector
//! products, damped SPD solves via Cholesky, symmetric eigendecomposition, and
//! Kronecker-product application without materializing the product.
//!
//! Everything here is f64, row-major, and uses a fixed summation order so
//! results are bit-reproducible for identical inputs.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Absolute symmetry tolerance accepted by [`solve_spd`] and [`eig_sym`].
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data. Fails on length mismatch or
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix entry".into()));
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// C = A * B.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let brow = other.row(k);
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for j in 0..other.cols {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(out)
    }

    /// Largest |a_ij - a_ji| over the matrix; zero for exactly symmetric input.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// (A + Aᵀ) / 2; useful for operators that are symmetric only up to
    /// numerical noise.
    pub fn symmetrized(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self.get(i, j) + self.get(j, i))
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn check_square_symmetric(&self) -> Result<()> {
        if self.rows != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "expected square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        let asym = self.max_asymmetry();
        if asym > SYMMETRY_TOL {
            return Err(Error::NotSymmetric { max_asymmetry: asym, tol: SYMMETRY_TOL });
        }
        Ok(())
    }
}

/// Orthonormal eigenbasis of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    /// Eigenvectors as orthonormal columns.
    pub eigenvectors: DenseMatrix,
    /// Eigenvalues in ascending order, aligned with the columns above.
    pub eigenvalues: Vec<f64>,
}

impl EigenDecomposition {
    /// Reconstructs Q diag(Λ) Qᵀ.
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.eigenvalues.len();
        let q = &self.eigenvectors;
        DenseMatrix::from_fn(n, n, |i, j| {
            let mut s = 0.0;
            for k in 0..n {
                s += q.get(i, k) * self.eigenvalues[k] * q.get(j, k);
            }
            s
        })
    }
}

/// Standard matrix-vector product.
pub fn matvec(m: &DenseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != m.cols {
        return Err(Error::DimensionMismatch(format!(
            "matvec: matrix has {} cols, vector has {}",
            m.cols,
            v.len()
        )));
    }
    let mut out = vec![0.0; m.rows];
    for i in 0..m.rows {
        let row = m.row(i);
        let mut s = 0.0;
        for j in 0..m.cols {
            s += row[j] * v[j];
        }
        out[i] = s;
    }
    Ok(out)
}

/// Cholesky factor of a damped SPD matrix, reusable across many solves.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    // Lower-triangular factor, row-major, dense storage.
    l: DenseMatrix,
}

impl CholeskyFactor {
    /// Factors `m + damping * I`. `m` must be symmetric within [`SYMMETRY_TOL`]
    /// and the damped matrix positive definite; there is no pseudo-inverse
    /// fallback, failure is an error.
    pub fn new(m: &DenseMatrix, damping: f64) -> Result<Self> {
        m.check_square_symmetric()?;
        if !damping.is_finite() || damping < 0.0 {
            return Err(Error::Config {
                path: "damping".into(),
                message: format!("must be finite and nonnegative, got {damping}"),
            });
        }
        let n = m.rows;
        let mut l = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                // Work on the symmetrized entry so tiny asymmetries within
                // tolerance do not leak into the factor.
                let mut s = 0.5 * (m.get(i, j) + m.get(j, i));
                if i == j {
                    s += damping;
                }
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::NotPositiveDefinite { pivot: i });
                    }
                    l.set(i, j, s.sqrt());
                } else {
                    l.set(i, j, s / l.get(j, j));
                }
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// Solves (L Lᵀ) x = v.
    pub fn solve(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.l.rows;
        if v.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "solve: factor dim {n}, vector has {}",
                v.len()
            )));
        }
        let mut y = v.to_vec();
        // Forward substitution L y = v.
        for i in 0..n {
            let mut s = y[i];
            let row = self.l.row(i);
            for k in 0..i {
                s -= row[k] * y[k];
            }
            y[i] = s / row[i];
        }
        // Back substitution Lᵀ x = y.
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l.get(k, i) * y[k];
            }
            y[i] = s / self.l.get(i, i);
        }
        Ok(y)
    }
}

/// Solves `(m + damping * I) x = v` for symmetric positive definite input.
pub fn solve_spd(m: &DenseMatrix, v: &[f64], damping: f64) -> Result<Vec<f64>> {
    CholeskyFactor::new(m, damping)?.solve(v)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Intended for the moderate sizes this crate works with (curvature factor
/// matrices, desk-scale Hessians); not tuned for very large inputs.
pub fn eig_sym(m: &DenseMatrix) -> Result<EigenDecomposition> {
    m.check_square_symmetric()?;
    let n = m.rows;
    let mut a = m.symmetrized();
    let mut q = DenseMatrix::identity(n);
    if n == 0 {
        return Ok(EigenDecomposition { eigenvectors: q, eigenvalues: vec![] });
    }

    let off = |a: &DenseMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += a.get(i, j) * a.get(i, j);
            }
        }
        s.sqrt()
    };
    let scale = a.frobenius_norm().max(1.0);
    let tol = 1e-14 * scale;

    for _sweep in 0..100 {
        if off(&a) <= tol {
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = a.get(p, r);
                if apr.abs() <= 1e-300 {
                    continue;
                }
                let app = a.get(p, p);
                let arr = a.get(r, r);
                let theta = (arr - app) / (2.0 * apr);
                // Stable computation of tan of the rotation angle.
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akr = a.get(k, r);
                    a.set(k, p, c * akp - s * akr);
                    a.set(k, r, s * akp + c * akr);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let ark = a.get(r, k);
                    a.set(p, k, c * apk - s * ark);
                    a.set(r, k, s * apk + c * ark);
                }
                for k in 0..n {
                    let qkp = q.get(k, p);
                    let qkr = q.get(k, r);
                    q.set(k, p, c * qkp - s * qkr);
                    q.set(k, r, s * qkp + c * qkr);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    order.sort_by(|&i, &j| diag[i].partial_cmp(&diag[j]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let eigenvectors = DenseMatrix::from_fn(n, n, |i, j| q.get(i, order[j]));
    Ok(EigenDecomposition { eigenvectors, eigenvalues })
}

/// Computes `(a ⊗ b) · v` without forming the Kronecker product.
///
/// `v` is read as a row-major `a.cols × b.cols` matrix X; the result is the
/// row-major flattening of `a · X · bᵀ`.
pub fn kron_apply(a: &DenseMatrix, b: &DenseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != a.cols * b.cols {
        return Err(Error::DimensionMismatch(format!(
            "kron_apply: expected vector of len {} = {} * {}, got {}",
            a.cols * b.cols,
            a.cols,
            b.cols,
            v.len()
        )));
    }
    // X bᵀ, with X[ja, jb] = v[ja * b.cols + jb].
    let mut xbt = vec![0.0; a.cols * b.rows];
    for ja in 0..a.cols {
        let xrow = &v[ja * b.cols..(ja + 1) * b.cols];
        let orow = &mut xbt[ja * b.rows..(ja + 1) * b.rows];
        for ib in 0..b.rows {
            let brow = b.row(ib);
            let mut s = 0.0;
            for jb in 0..b.cols {
                s += brow[jb] * xrow[jb];
            }
            orow[ib] = s;
        }
    }
    // a · (X bᵀ), flattened row-major.
    let mut out = vec![0.0; a.rows * b.rows];
    for ia in 0..a.rows {
        let arow = a.row(ia);
        let orow = &mut out[ia * b.rows..(ia + 1) * b.rows];
        for ja in 0..a.cols {
            let w = arow[ja];
            if w == 0.0 {
                continue;
            }
            let xrow = &xbt[ja * b.rows..(ja + 1) * b.rows];
            for ib in 0..b.rows {
                orow[ib] += w * xrow[ib];
            }
        }
    }
    Ok(out)
}

/// Explicit Kronecker product; test oracle and small-scale fallback.
pub fn kron_explicit(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows * b.rows, a.cols * b.cols, |i, j| {
        a.get(i / b.rows, j / b.cols) * b.get(i % b.rows, j % b.cols)
    })
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn norm1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// a + s * b, elementwise.
pub fn axpy(a: &[f64], s: f64, b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + s * y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    axpy(a, -1.0, b)
}

pub fn scale(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// Cosine similarity; zero if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm2(a);
    let nb = norm2(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}
