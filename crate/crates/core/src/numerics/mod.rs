//! Seeded randomness, small dense linear algebra, and finite differences.
//!
//! Singular values come from nalgebra's SVD (Householder bidiagonalization
//! followed by implicit-shift Golub–Kahan QR sweeps), and symmetric
//! eigendecompositions from nalgebra's `SymmetricEigen`. Both are
//! deterministic for identical inputs.

mod rng;

pub use rng::{SeededRng, UNIT_LAPLACE_SCALE};

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use thiserror::Error;

/// Dense row-major matrix of `f64`.
pub type Matrix = Array2<f64>;

/// Default relative tolerance for [`numerical_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("non-finite function value {value} at coordinate {coordinate}")]
    NonFiniteEvaluation { coordinate: usize, value: f64 },
}

fn ensure_finite(m: ArrayView2<f64>) -> Result<(), NumericsError> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::InvalidInput("matrix has non-finite entries".into()))
    }
}

pub(crate) fn to_nalgebra(m: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Singular values in descending order.
pub fn singular_values(m: ArrayView2<f64>) -> Result<Vec<f64>, NumericsError> {
    if m.is_empty() {
        return Err(NumericsError::InvalidInput("empty matrix".into()));
    }
    ensure_finite(m)?;
    let svd = to_nalgebra(m).svd(false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Number of singular values strictly above `rel_tol · σ_max`.
pub fn numerical_rank(m: ArrayView2<f64>, rel_tol: f64) -> Result<usize, NumericsError> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(NumericsError::InvalidInput(format!(
            "rel_tol must lie in (0, 1), got {rel_tol}"
        )));
    }
    let s = singular_values(m)?;
    let smax = s[0];
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&v| v > rel_tol * smax).count())
}

/// `σ_max / σ_min`, or `f64::INFINITY` when the matrix is singular.
///
/// A singular value at or below `σ_max · dim · ε_machine` is treated as an
/// exact zero, so rank-deficient inputs report infinity rather than a huge
/// finite number produced by rounding.
pub fn condition_number(m: ArrayView2<f64>) -> Result<f64, NumericsError> {
    if m.nrows() != m.ncols() {
        return Err(NumericsError::InvalidInput(format!(
            "condition number needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let s = singular_values(m)?;
    let smax = s[0];
    let smin = *s.last().unwrap();
    let floor = smax * m.nrows() as f64 * f64::EPSILON;
    if smax == 0.0 || smin <= floor {
        Ok(f64::INFINITY)
    } else {
        Ok(smax / smin)
    }
}

/// Symmetric eigendecomposition with eigenvalues in descending order.
///
/// Each eigenvector (column of the returned matrix) is sign-normalized so
/// its largest-magnitude entry is positive.
pub fn symmetric_eigen(m: ArrayView2<f64>) -> Result<(Vec<f64>, Matrix), NumericsError> {
    if m.nrows() != m.ncols() || m.is_empty() {
        return Err(NumericsError::InvalidInput("need a nonempty square matrix".into()));
    }
    ensure_finite(m)?;
    let eig = to_nalgebra(m).symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = Matrix::zeros((n, n));
    for (col, &k) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(k);
        let mut pivot = 0;
        for i in 1..n {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[[i, col]] = sign * v[i];
        }
    }
    Ok((values, vectors))
}

/// Empirical mean and covariance (normalized by `T`, not `T - 1`).
pub fn mean_and_covariance(data: ArrayView2<f64>) -> (Array1<f64>, Matrix) {
    let t = data.nrows() as f64;
    let mean = data.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(data.ncols()));
    let centered = &data - &mean;
    let cov = centered.t().dot(&centered) / t;
    (mean, cov)
}

/// Output of [`whiten`].
#[derive(Debug, Clone)]
pub struct Whitening {
    pub whitened: Matrix,
    /// Rows are the scaled principal axes: `transform = Λ^{-1/2} Eᵀ`.
    pub transform: Matrix,
    pub mean: Array1<f64>,
}

impl Whitening {
    /// Applies the stored centering and transform to new rows.
    pub fn apply(&self, data: ArrayView2<f64>) -> Matrix {
        (&data - &self.mean).dot(&self.transform.t())
    }
}

/// PCA whitening: `whitened = (data − mean) · transformᵀ` with
/// `transform = Λ^{-1/2} Eᵀ` from the eigendecomposition `C = E Λ Eᵀ` of the
/// sample covariance.
pub fn whiten(data: ArrayView2<f64>) -> Result<Whitening, NumericsError> {
    let (t, n) = data.dim();
    if n == 0 || t <= n {
        return Err(NumericsError::InvalidInput(format!(
            "whitening needs more rows than columns, got {t}x{n}"
        )));
    }
    ensure_finite(data)?;
    let (mean, cov) = mean_and_covariance(data);
    let (values, vectors) = symmetric_eigen(cov.view())?;
    let lmax = values[0];
    let lmin = values[n - 1];
    if lmax <= 0.0 || lmin <= lmax * 1e-12 {
        return Err(NumericsError::DegenerateData(format!(
            "sample covariance is singular (eigenvalues {lmax:e} .. {lmin:e})"
        )));
    }
    let mut transform = vectors.reversed_axes();
    for (mut row, &l) in transform.axis_iter_mut(Axis(0)).zip(values.iter()) {
        row /= l.sqrt();
    }
    let whitened = (&data - &mean).dot(&transform.t());
    Ok(Whitening {
        whitened,
        transform,
        mean,
    })
}

/// Inverse symmetric square root `M^{-1/2}` of a symmetric positive definite matrix.
pub fn inverse_sqrt_spd(m: ArrayView2<f64>) -> Result<Matrix, NumericsError> {
    let (values, vectors) = symmetric_eigen(m)?;
    if values.iter().any(|&l| l <= 0.0) {
        return Err(NumericsError::DegenerateData(
            "matrix is not positive definite".into(),
        ));
    }
    let scaled = Array2::from_shape_fn(vectors.dim(), |(i, j)| vectors[[i, j]] / values[j].sqrt());
    Ok(scaled.dot(&vectors.t()))
}

/// Central-difference gradient `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>, NumericsError>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(NumericsError::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + eps;
        let plus = f(&point);
        point[i] = orig - eps;
        let minus = f(&point);
        point[i] = orig;
        for value in [plus, minus] {
            if !value.is_finite() {
                return Err(NumericsError::NonFiniteEvaluation { coordinate: i, value });
            }
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}
