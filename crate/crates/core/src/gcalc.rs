//! The sublinear G-function on symmetric matrices.
//!
//! For bounds `0 < σ_low < σ_high` the G-function is
//!
//! ```text
//! G(X) = 1/2 · sup { <γ, X> : γ symmetric, σ_low²·I ≤ γ ≤ σ_high²·I }
//! ```
//!
//! The feasible set is invariant under orthogonal conjugation, so the supremum
//! is attained in the eigenbasis of `X` with each eigenvalue paired to the
//! interval endpoint matching its sign. [`g_value`] evaluates that closed form;
//! [`g_value_oracle`] searches an explicit candidate set and exists to check it.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues with magnitude below this are treated as exact zeros.
pub const EIGEN_ZERO_TOL: f64 = 1e-12;

/// A finite symmetric `m×m` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Symmetrizes `(A + Aᵀ)/2`. Fails on non-square or non-finite input.
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "symmetric matrix must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.nrows() == 0 {
            return Err(Error::InvalidArgument("matrix dimension must be >= 1".into()));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("symmetric matrix entries".into()));
        }
        let sym = (&a + a.transpose()) * 0.5;
        Ok(Self(sym))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::ShapeMismatch("rows must form a square matrix".into()));
        }
        Self::new(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
    }

    pub fn from_diag(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(
            diag,
        )))
    }

    pub fn zeros(m: usize) -> Self {
        Self(DMatrix::zeros(m, m))
    }

    pub fn identity(m: usize) -> Self {
        Self(DMatrix::identity(m, m))
    }

    pub fn scalar(m: usize, c: f64) -> Self {
        Self(DMatrix::identity(m, m) * c)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    /// Frobenius norm `sqrt(trace(A Aᵀ))`.
    pub fn frobenius(&self) -> f64 {
        self.0.norm()
    }

    /// Frobenius inner product `Σ_{kl} A_kl B_kl`.
    pub fn frobenius_dot(&self, other: &SymMatrix) -> f64 {
        self.0.dot(&other.0)
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        SymMatrix(&self.0 * c)
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 - &other.0)
    }

    /// Eigenvalues (ascending) and the matching orthonormal eigenvectors as columns.
    pub fn eigen(&self) -> (Vec<f64>, DMatrix<f64>) {
        let eig = SymmetricEigen::new(self.0.clone());
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let m = self.dim();
        let vectors = DMatrix::from_fn(m, m, |i, j| eig.eigenvectors[(i, order[j])]);
        (values, vectors)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim() == 1 {
            return self.0[(0, 0)];
        }
        SymmetricEigen::new(self.0.clone())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    /// Principal square root of a positive semidefinite matrix.
    pub fn sqrt_psd(&self) -> Result<DMatrix<f64>> {
        if self.dim() == 1 {
            let v = self.0[(0, 0)];
            if v < -EIGEN_ZERO_TOL {
                return Err(Error::InvalidArgument("matrix is not PSD".into()));
            }
            return Ok(DMatrix::from_element(1, 1, v.max(0.0).sqrt()));
        }
        let (vals, vecs) = self.eigen();
        if vals.iter().any(|&v| v < -EIGEN_ZERO_TOL) {
            return Err(Error::InvalidArgument("matrix is not PSD".into()));
        }
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            vals.len(),
            vals.iter().map(|v| v.max(0.0).sqrt()),
        ));
        Ok(&vecs * d * vecs.transpose())
    }
}

/// Volatility bounds `σ_low < σ_high` for an `m`-dimensional driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GBounds {
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub dim: usize,
}

impl GBounds {
    pub fn new(sigma_low: f64, sigma_high: f64, dim: usize) -> Result<Self> {
        if !(sigma_low.is_finite() && sigma_high.is_finite()) {
            return Err(Error::InvalidBounds("bounds must be finite".into()));
        }
        if sigma_low <= 0.0 || sigma_high <= sigma_low {
            return Err(Error::InvalidBounds(format!(
                "need 0 < sigma_low < sigma_high, got {sigma_low}, {sigma_high}"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidBounds("dimension must be >= 1".into()));
        }
        Ok(Self { sigma_low, sigma_high, dim })
    }

    pub fn var_low(&self) -> f64 {
        self.sigma_low * self.sigma_low
    }

    pub fn var_high(&self) -> f64 {
        self.sigma_high * self.sigma_high
    }
}

fn check_dim(x: &SymMatrix, bounds: &GBounds) -> Result<()> {
    if x.dim() != bounds.dim {
        return Err(Error::DimensionMismatch { expected: bounds.dim, got: x.dim() });
    }
    Ok(())
}

/// Scalar G-function, `m = 1`.
#[inline]
pub fn g_scalar(x: f64, bounds: &GBounds) -> f64 {
    if x >= 0.0 {
        0.5 * bounds.var_high() * x
    } else {
        0.5 * bounds.var_low() * x
    }
}

/// Exact `G(X) = ½(σ_high²·tr X⁺ − σ_low²·tr X⁻)`.
pub fn g_value(x: &SymMatrix, bounds: &GBounds) -> Result<f64> {
    check_dim(x, bounds)?;
    if x.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("G-function argument".into()));
    }
    if x.dim() == 1 {
        return Ok(g_scalar(x.0[(0, 0)], bounds));
    }
    let eig = SymmetricEigen::new(x.0.clone());
    let (mut pos, mut neg) = (0.0, 0.0);
    for &lambda in eig.eigenvalues.iter() {
        if lambda > EIGEN_ZERO_TOL {
            pos += lambda;
        } else if lambda < -EIGEN_ZERO_TOL {
            neg -= lambda;
        }
    }
    Ok(0.5 * (bounds.var_high() * pos - bounds.var_low() * neg))
}

/// Maximum of `½<γ, X>` over an explicit candidate set: every endpoint
/// assignment in the eigenbasis of `X` plus `search_budget` random rotations of
/// random diagonals in `[σ_low², σ_high²]`.
pub fn g_value_oracle(x: &SymMatrix, bounds: &GBounds, search_budget: usize) -> Result<f64> {
    check_dim(x, bounds)?;
    if search_budget == 0 {
        return Err(Error::InvalidArgument("search_budget must be >= 1".into()));
    }
    let m = x.dim();
    let (_, q) = x.eigen();
    let (lo, hi) = (bounds.var_low(), bounds.var_high());
    let mut best = f64::NEG_INFINITY;

    for mask in 0u64..(1u64 << m) {
        let c: Vec<f64> = (0..m).map(|k| if mask >> k & 1 == 1 { hi } else { lo }).collect();
        let gamma = rotate_diag(&q, &c);
        best = best.max(0.5 * gamma.dot(&x.0));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x6f72_6163_6c65 ^ search_budget as u64);
    for _ in 0..search_budget {
        let r = random_orthogonal(m, &mut rng);
        let u: Vec<f64> = (0..m).map(|_| rng.random_range(lo..=hi)).collect();
        let gamma = rotate_diag(&r, &u);
        best = best.max(0.5 * gamma.dot(&x.0));
    }
    Ok(best)
}

fn rotate_diag(q: &DMatrix<f64>, diag: &[f64]) -> DMatrix<f64> {
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag));
    q * d * q.transpose()
}

/// Haar-ish random orthogonal matrix from the QR factor of a Gaussian matrix.
pub(crate) fn random_orthogonal<R: Rng>(m: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..m {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `X ≤ Y` in Loewner order: the smallest eigenvalue of `Y − X` is `≥ −tol`.
pub fn loewner_leq(x: &SymMatrix, y: &SymMatrix, tol: f64) -> Result<bool> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch { expected: x.dim(), got: y.dim() });
    }
    Ok(y.sub(x).min_eigenvalue() >= -tol)
}
