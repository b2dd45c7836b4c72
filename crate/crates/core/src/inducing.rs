//! Greedy-variance inducing point selection.
//!
//! Each step picks the training input with the largest Nyström residual
//! variance `k(x, x) - q(x, x)` and then applies one step of a partial
//! pivoted Cholesky factorization to update all residuals.

use nalgebra::DMatrix;

use crate::kernels::{row_major, KernelSpec};

/// Selection stops once the largest residual falls below this fraction of the
/// largest initial diagonal entry.
pub const EARLY_STOP_REL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    /// Selected training indices, in selection order.
    pub indices: Vec<usize>,
    /// Residual diagonal after the last selection.
    pub residual_diag: Vec<f64>,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Rows of `x` at the selected indices.
    pub fn gather(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x.select_rows(&self.indices)
    }
}

/// Lowest index among the maximal entries.
fn argmax_lowest(values: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best
}

/// Chooses up to `m` rows of `x` by greedy residual variance.
///
/// Runs in O(N M²) time and O(N M) memory. Returns fewer than `m` indices
/// when the residual collapses (see [`EARLY_STOP_REL`]).
pub fn greedy_variance_select(x: &DMatrix<f64>, spec: &KernelSpec, m: usize) -> SelectionResult {
    let n = x.nrows();
    let d = x.ncols();
    let m = m.min(n);
    let rows = row_major(x);
    let row = |i: usize| &rows[i * d..(i + 1) * d];

    let mut residual: Vec<f64> = (0..n).map(|i| spec.diag(row(i))).collect();
    let threshold = EARLY_STOP_REL * residual.iter().cloned().fold(0.0, f64::max);
    let mut indices = Vec::with_capacity(m);
    // factor[k] holds column k of the partial Cholesky factor, length N.
    let mut factor: Vec<Vec<f64>> = Vec::with_capacity(m);

    while indices.len() < m {
        let Some((j, rj)) = argmax_lowest(&residual) else {
            break;
        };
        if !(rj > threshold) || indices.contains(&j) {
            break;
        }
        let pivot = rj.sqrt();
        let xj = row(j);
        let mut col = vec![0.0; n];
        for (i, c) in col.iter_mut().enumerate() {
            let mut v = spec.eval(row(i), xj);
            for f in &factor {
                v -= f[i] * f[j];
            }
            *c = v / pivot;
        }
        for (r, c) in residual.iter_mut().zip(&col) {
            *r -= c * c;
        }
        residual[j] = 0.0;
        factor.push(col);
        indices.push(j);
    }

    SelectionResult {
        indices,
        residual_diag: residual,
    }
}
