//! Dense symmetric linear algebra: SPD solves, symmetric eigendecomposition,
//! PSD square roots and spectral norms.
//!
//! Everything here is deterministic. Cholesky and the symmetric eigensolver
//! come from `nalgebra`; this module adds the PSD tolerance policy on top.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// Relative tolerance below which negative eigenvalues are treated as roundoff.
pub const PSD_TOL: f64 = 1e-8;

const SYMMETRY_TOL: f64 = 1e-12;

/// Tolerance for treating an eigenvalue as negative, given the largest eigenvalue.
pub fn psd_floor(lambda_max: f64) -> f64 {
    -PSD_TOL * lambda_max.max(1.0)
}

/// A real symmetric matrix, stored symmetrized as `(A + Aᵀ) / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Checks symmetry and stores the symmetrized matrix.
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                got: a.ncols(),
            });
        }
        let scale = a.amax().max(1.0);
        let asym = (&a - a.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric(asym));
        }
        Ok(Self::symmetrized(a))
    }

    /// Stores `(A + Aᵀ) / 2` without checking how far `A` was from symmetric.
    pub fn symmetrized(a: DMatrix<f64>) -> Self {
        assert!(a.is_square(), "symmetrized: matrix must be square");
        let t = a.transpose();
        SymMatrix((a + t) * 0.5)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        for r in rows {
            check_dim(n, r.len())?;
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn max_abs(&self) -> f64 {
        self.0.amax()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), x.len())?;
        let v = &self.0 * DVector::from_column_slice(x);
        Ok(v.as_slice().to_vec())
    }

    /// `xᵀ A x`.
    pub fn quadratic_form(&self, x: &[f64]) -> Result<f64> {
        let ax = self.mul_vec(x)?;
        Ok(dot(x, &ax))
    }

    /// Kronecker product `self ⊗ I_m`, laid out block by block.
    pub fn kron_identity(&self, m: usize) -> SymMatrix {
        let n = self.dim();
        let mut out = DMatrix::zeros(n * m, n * m);
        for i in 0..n {
            for j in 0..n {
                let v = self.0[(i, j)];
                for a in 0..m {
                    out[(i * m + a, j * m + a)] = v;
                }
            }
        }
        SymMatrix(out)
    }

    pub fn eig(&self) -> EigDecomp {
        EigDecomp::new(self)
    }
}

/// Symmetric eigendecomposition with eigenvalues in ascending order.
#[derive(Debug, Clone)]
pub struct EigDecomp {
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors, one per column, matching `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
}

impl EigDecomp {
    pub fn new(a: &SymMatrix) -> Self {
        let n = a.dim();
        if n == 0 {
            return EigDecomp {
                eigenvalues: DVector::zeros(0),
                eigenvectors: DMatrix::zeros(0, 0),
            };
        }
        let se = a.matrix().clone().symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| se.eigenvalues[i].total_cmp(&se.eigenvalues[j]));
        let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| se.eigenvalues[i]));
        let eigenvectors = DMatrix::from_fn(n, n, |r, c| se.eigenvectors[(r, order[c])]);
        EigDecomp {
            eigenvalues,
            eigenvectors,
        }
    }

    pub fn min(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `Q f(Λ) Qᵀ`.
    pub fn apply_spectral(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let q = &self.eigenvectors;
        let mut scaled = q.clone();
        for (c, &lam) in self.eigenvalues.iter().enumerate() {
            let fl = f(lam);
            scaled.column_mut(c).scale_mut(fl);
        }
        scaled * q.transpose()
    }

    /// Eigenvalues with roundoff negatives set to zero; errors on anything
    /// below the PSD tolerance.
    fn clamped(&self) -> Result<DVector<f64>> {
        let lmax = self.max().max(0.0);
        let floor = psd_floor(lmax);
        let mut out = self.eigenvalues.clone();
        for l in out.iter_mut() {
            if *l < floor {
                return Err(Error::NotPsd(*l));
            }
            if *l < 0.0 {
                *l = 0.0;
            }
        }
        Ok(out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Solves `(A + shift·I) x = b` for PSD `A`.
///
/// Cholesky first; on breakdown falls back to the eigendecomposition with
/// roundoff-negative eigenvalues clamped to zero.
pub fn solve_spd(a: &SymMatrix, shift: f64, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.dim();
    check_dim(n, b.len())?;
    if !(shift >= 0.0) || !shift.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "shift must be finite and nonnegative, got {shift}"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let rhs = DVector::from_column_slice(b);
    let mut shifted = a.matrix().clone();
    for i in 0..n {
        shifted[(i, i)] += shift;
    }
    if let Some(chol) = shifted.cholesky() {
        let x = chol.solve(&rhs);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x.as_slice().to_vec());
        }
    }

    let eig = a.eig();
    let lam = eig.clamped()?;
    let lmax = lam.max();
    let shifted_lam = lam.map(|l| l + shift);
    let smallest = shifted_lam.min();
    let singular_floor = f64::EPSILON * n as f64 * lmax.max(shift).max(f64::MIN_POSITIVE);
    if smallest <= singular_floor {
        return Err(Error::Singular(eig.min() + shift));
    }
    let q = &eig.eigenvectors;
    let mut coef = q.transpose() * rhs;
    for (c, l) in coef.iter_mut().zip(shifted_lam.iter()) {
        *c /= *l;
    }
    Ok((q * coef).as_slice().to_vec())
}

/// The unique PSD square root.
pub fn sqrt_psd(a: &SymMatrix) -> Result<SymMatrix> {
    if a.dim() == 0 {
        return Ok(a.clone());
    }
    let eig = a.eig();
    let lam = eig.clamped()?;
    let clamped = EigDecomp {
        eigenvalues: lam,
        eigenvectors: eig.eigenvectors,
    };
    Ok(SymMatrix::symmetrized(clamped.apply_spectral(f64::sqrt)))
}

/// Operator 2-norm, i.e. the largest absolute eigenvalue.
pub fn spectral_norm(a: &SymMatrix) -> f64 {
    if a.dim() == 0 {
        return 0.0;
    }
    let eig = a.eig();
    eig.min().abs().max(eig.max().abs())
}

pub fn min_eigenvalue(a: &SymMatrix) -> f64 {
    a.eig().min()
}
