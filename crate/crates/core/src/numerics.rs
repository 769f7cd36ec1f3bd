//! Dense small-matrix primitives.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`. Target sizes are
//! n <= 10 for plant matrices and n^2 <= 100 for lifted second-moment maps,
//! so no attempt is made at sparsity or blocking.
//!
//! Vectorization is column-major throughout (nalgebra's storage order), so
//! `vec(M X N^T) = (N ⊗ M) vec(X)`.

use nalgebra::{DMatrix, DVector};
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

/// Relative tolerance for symmetry checks and eigenvalue clamping.
pub const SYM_TOL: f64 = 1e-10;

/// Iteration cap for the power method.
pub const POWER_MAX_ITER: usize = 100_000;

/// Relative change between successive power-method estimates that counts as converged.
pub const POWER_TOL: f64 = 1e-12;

/// Power-method and dense spectral radii must agree to this relative tolerance.
pub const SPECTRAL_AGREEMENT: f64 = 1e-7;

/// A real symmetric matrix.
///
/// Construction always stores `(M + M^T) / 2`, so downstream eigen routines
/// never see the asymmetry that accumulates in Riccati iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Validates a user-supplied matrix: square, finite, and symmetric to
    /// `SYM_TOL` relative to its Frobenius norm.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidInput("empty matrix".into()));
        }
        ensure_finite(&m)?;
        let asym = (&m - m.transpose()).norm();
        if asym > SYM_TOL * (1.0 + m.norm()) {
            return Err(Error::InvalidInput(format!(
                "matrix is not symmetric (asymmetry {asym:e})"
            )));
        }
        Ok(Self::symmetrize(m))
    }

    /// Symmetrizes a computed square matrix without a tolerance check.
    pub fn symmetrize(m: DMatrix<f64>) -> Self {
        debug_assert!(m.is_square());
        let t = m.transpose();
        Self((m + t) * 0.5)
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    /// `x x^T`
    pub fn outer(x: &DVector<f64>) -> Self {
        Self::symmetrize(x * x.transpose())
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn scalar(&self) -> f64 {
        self.0[(0, 0)]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        matrix_rows(&self.0)
    }
}

impl Serialize for SymMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(serializer)
    }
}

/// Row-major nested representation of a matrix.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn ensure_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidInput("matrix has non-finite entries".into()))
    }
}

/// Extreme eigenvalues `(λmin, λmax)` of a symmetric matrix.
pub fn sym_eig_extremes(m: &SymMatrix) -> Result<(f64, f64)> {
    ensure_finite(m.as_matrix())?;
    let eig = m.as_matrix().clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    Ok((min, max))
}

pub fn lambda_min(m: &SymMatrix) -> Result<f64> {
    sym_eig_extremes(m).map(|(lo, _)| lo)
}

pub fn lambda_max(m: &SymMatrix) -> Result<f64> {
    sym_eig_extremes(m).map(|(_, hi)| hi)
}

/// Principal square root of a positive semidefinite matrix.
///
/// Eigenvalues down to `-SYM_TOL * ‖M‖₂` are treated as rounding noise and
/// clamped to zero; anything more negative is rejected.
pub fn psd_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    ensure_finite(m.as_matrix())?;
    let eig = m.as_matrix().clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if min < -SYM_TOL * scale {
        return Err(Error::NotPsd { min_eig: min });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    Ok(SymMatrix::symmetrize(
        v * DMatrix::from_diagonal(&roots) * v.transpose(),
    ))
}

/// Largest generalized eigenvalue of the pencil `(num, den)` with `den ≻ 0`,
/// i.e. `λmax(den^{-1/2} num den^{-1/2})`.
///
/// Computed through the Cholesky factor `den = L L^T`, whose congruence
/// `L^{-1} num L^{-T}` has the same spectrum as the symmetric square-root form.
pub fn generalized_max_eig(num: &SymMatrix, den: &SymMatrix) -> Result<f64> {
    if num.dim() != den.dim() {
        return Err(Error::Dimension(format!(
            "pencil sizes differ: {} vs {}",
            num.dim(),
            den.dim()
        )));
    }
    let chol = den
        .as_matrix()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularTransform("denominator is not positive definite".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SingularTransform("Cholesky factor is singular".into()))?;
    let congruent = SymMatrix::symmetrize(&linv * num.as_matrix() * linv.transpose());
    lambda_max(&congruent)
}

/// Kronecker product with block layout `(m1)_ij · m2`.
pub fn kron(m1: &DMatrix<f64>, m2: &DMatrix<f64>) -> DMatrix<f64> {
    m1.kronecker(m2)
}

/// Column-major vectorization.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_of`] for an n×n matrix.
pub fn unvec(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(n, n, v.as_slice())
}

/// Spectral radius of a dense square matrix via the real Schur form.
pub fn dense_spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "spectral radius needs a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    ensure_finite(m)?;
    if m.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let schur = m
        .clone()
        .try_schur(f64::EPSILON, 100_000)
        .ok_or_else(|| Error::NumericalFailure("Schur decomposition did not converge".into()))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// Power iteration from a given start vector. Returns `None` when the cap is
/// reached without the estimate settling.
fn power_iteration(m: &DMatrix<f64>, start: DVector<f64>) -> Option<f64> {
    let mut v = start;
    let norm = v.norm();
    if norm == 0.0 {
        return None;
    }
    v /= norm;
    let mut w = DVector::zeros(v.len());
    let mut prev = f64::NAN;
    for _ in 0..POWER_MAX_ITER {
        w.gemv(1.0, m, &v, 0.0);
        let est = w.norm();
        if est == 0.0 {
            return Some(0.0);
        }
        if (est - prev).abs() <= POWER_TOL * est {
            return Some(est);
        }
        prev = est;
        std::mem::swap(&mut v, &mut w);
        v /= est;
    }
    None
}

/// Spectral radius `ρ(M)`.
///
/// With a `cone_seed`, `M` is taken to be a vectorized second-moment map
/// (it preserves the PSD cone), so power iteration from `vec(seed)` converges
/// to the real, nonnegative dominant eigenvalue. The dense Schur path always
/// runs as well; when both succeed they must agree to `SPECTRAL_AGREEMENT`.
pub fn spectral_radius(m: &DMatrix<f64>, cone_seed: Option<&SymMatrix>) -> Result<f64> {
    let dense = dense_spectral_radius(m);
    let Some(seed) = cone_seed else {
        return dense;
    };
    if seed.dim() * seed.dim() != m.nrows() {
        return Err(Error::Dimension(format!(
            "cone seed of size {} does not match a {}x{} lifted map",
            seed.dim(),
            m.nrows(),
            m.ncols()
        )));
    }
    let power = power_iteration(m, vec_of(seed.as_matrix()));
    match (power, dense) {
        (Some(p), Ok(d)) => {
            if (p - d).abs() <= SPECTRAL_AGREEMENT * d.max(1.0) {
                Ok(d)
            } else {
                Err(Error::NumericalFailure(format!(
                    "power iteration ({p}) and dense eigenvalues ({d}) disagree"
                )))
            }
        }
        (None, Ok(d)) => Ok(d),
        (Some(p), Err(_)) => Ok(p),
        (None, Err(e)) => Err(e),
    }
}
