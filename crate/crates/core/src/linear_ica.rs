//! Symmetric FastICA, used as a linear post-processing step on learned features.

use ndarray::{Array1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{inverse_sqrt_spd, whiten, Matrix, NumericsError, SeededRng, Whitening};

#[derive(Debug, Error)]
pub enum IcaError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate features: {0}")]
    Degenerate(String),
}

impl From<NumericsError> for IcaError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::InvalidInput(m) => IcaError::InvalidInput(m),
            other => IcaError::Degenerate(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contrast {
    /// `g(y) = tanh(y)`
    Tanh,
    /// `g(y) = y³`
    Cube,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FastIcaConfig {
    pub contrast: Contrast,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for FastIcaConfig {
    fn default() -> Self {
        Self {
            contrast: Contrast::Tanh,
            max_iters: 500,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnmixResult {
    /// Estimated components, one per column.
    pub components: Matrix,
    /// Orthogonal rotation applied after whitening.
    pub rotation: Matrix,
    pub whitening: Whitening,
    pub converged: bool,
    pub iters: usize,
}

impl UnmixResult {
    /// Full linear unmixing `W V`, acting on centered rows as `y = W V (x − μ)`.
    pub fn unmixing(&self) -> Matrix {
        self.rotation.dot(&self.whitening.transform)
    }
}

/// `W ← (W Wᵀ)^{-1/2} W`
fn decorrelate(w: &Matrix) -> Result<Matrix, IcaError> {
    Ok(inverse_sqrt_spd(w.dot(&w.t()).view())?.dot(w))
}

/// Symmetric FastICA on the rows of `features`. Requires `T > 10 n`.
pub fn fastica(features: ArrayView2<f64>, config: &FastIcaConfig) -> Result<UnmixResult, IcaError> {
    let (t, n) = features.dim();
    if n == 0 {
        return Err(IcaError::InvalidInput("no feature columns".into()));
    }
    if t <= 10 * n {
        return Err(IcaError::InvalidInput(format!(
            "{t} rows are too few for {n} components (need more than {})",
            10 * n
        )));
    }
    if !(config.tol > 0.0) || config.max_iters == 0 {
        return Err(IcaError::InvalidInput("tol and max_iters must be positive".into()));
    }
    let whitening = whiten(features)?;
    let z = &whitening.whitened;
    let mut rng = SeededRng::new(config.seed);
    let mut w = decorrelate(&Matrix::from_shape_simple_fn((n, n), || rng.normal()))?;
    let tf = t as f64;
    let mut converged = false;
    let mut iters = 0;
    while iters < config.max_iters {
        iters += 1;
        let y = z.dot(&w.t());
        let (g, dg): (Matrix, Array1<f64>) = match config.contrast {
            Contrast::Tanh => {
                let g = y.mapv(f64::tanh);
                let dg = g.mapv(|v| 1.0 - v * v).mean_axis(Axis(0)).expect("rows");
                (g, dg)
            }
            Contrast::Cube => {
                let g = y.mapv(|v| v * v * v);
                let dg = y.mapv(|v| 3.0 * v * v).mean_axis(Axis(0)).expect("rows");
                (g, dg)
            }
        };
        let mut next = g.t().dot(z) / tf;
        for i in 0..n {
            next.row_mut(i).scaled_add(-dg[i], &w.row(i));
        }
        let next = decorrelate(&next)?;
        let change = next
            .dot(&w.t())
            .diag()
            .iter()
            .map(|d| (1.0 - d.abs()).abs())
            .fold(0.0, f64::max);
        w = next;
        if change < config.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("FastICA stopped after {iters} iterations without converging");
    }
    let components = z.dot(&w.t());
    Ok(UnmixResult {
        components,
        rotation: w,
        whitening,
        converged,
        iters,
    })
}
