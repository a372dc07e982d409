//! Cholesky factorisation with a jitter ladder, plus small dense helpers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagonal jitter rungs, each relative to the mean diagonal of the matrix
/// being factorised. Rungs are tried in order until one succeeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterLadder {
    pub rungs: Vec<f64>,
}

impl Default for JitterLadder {
    fn default() -> Self {
        Self {
            rungs: vec![1e-6, 1e-5, 1e-4],
        }
    }
}

impl JitterLadder {
    pub fn fixed(relative: f64) -> Self {
        Self {
            rungs: vec![relative],
        }
    }
}

/// A successful factorisation of `M + jitter·I`.
#[derive(Debug, Clone)]
pub struct Factor {
    pub cholesky: Cholesky<f64, Dyn>,
    /// Absolute jitter added to the diagonal.
    pub jitter: f64,
    /// Rung (relative to the mean diagonal) that succeeded.
    pub relative_jitter: f64,
}

impl Factor {
    pub fn dim(&self) -> usize {
        self.cholesky.l_dirty().nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self
            .cholesky
            .l_dirty()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.cholesky.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.cholesky.solve(b)
    }

    /// `L⁻¹ B` for the lower Cholesky factor `L`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        self.cholesky.l_dirty().solve_lower_triangular_mut(&mut out);
        out
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.cholesky.l()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.cholesky.inverse()
    }
}

pub fn mean_diagonal(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    m.diagonal().mean()
}

/// Factorises a symmetric matrix, escalating the jitter until Cholesky
/// succeeds. Fails with `SingularGram` at the top rung.
pub fn factorize(m: &DMatrix<f64>, ladder: &JitterLadder) -> Result<Factor> {
    let scale = mean_diagonal(m).abs().max(f64::MIN_POSITIVE);
    let mut last = 0.0;
    for &rel in &ladder.rungs {
        let jitter = rel * scale;
        last = jitter;
        if !m.iter().all(|v| v.is_finite()) {
            break;
        }
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(cholesky) = Cholesky::new(a) {
            if cholesky
                .l_dirty()
                .diagonal()
                .iter()
                .all(|d| *d > 0.0 && d.is_finite())
            {
                return Ok(Factor {
                    cholesky,
                    jitter,
                    relative_jitter: rel,
                });
            }
        }
    }
    Err(Error::SingularGram { jitter: last })
}

/// Replaces `m` with `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// `‖a − b‖_F / ‖b‖_F`.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

pub fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

pub fn select_block(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

pub fn select_entries(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_fn(rows.len(), |i, _| v[rows[i]])
}

/// `log N(x; mean, cov)` through a factorisation of `cov`.
pub fn gaussian_log_density(factor: &Factor, residual: &DVector<f64>) -> f64 {
    let n = residual.len() as f64;
    let alpha = factor.solve(residual);
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + factor.log_det() + residual.dot(&alpha))
}
