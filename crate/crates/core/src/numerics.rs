//! Dense linear algebra with adaptive jitter.
//!
//! Every kernel matrix in the crate is factorized through [`jittered_cholesky`]:
//! the first attempt is jitter-free, and on failure the diagonal increment grows
//! geometrically until all pivots are strictly positive and finite.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

/// Schedule of diagonal increments tried when a factorization fails.
///
/// Attempt 0 uses no jitter. Attempt `k >= 1` uses
/// `initial_jitter * growth_factor^(k-1)`, for `k = 1..=max_attempts`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub initial_jitter: f64,
    pub growth_factor: f64,
    pub max_attempts: usize,
    /// First schedule index to try. 0 starts with the jitter-free factorization.
    #[serde(default)]
    pub first_attempt: usize,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        Self {
            initial_jitter: 1e-10,
            growth_factor: 10.0,
            max_attempts: 10,
            first_attempt: 0,
        }
    }
}

impl JitterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_jitter > 0.0) || !(self.growth_factor > 1.0) || self.max_attempts == 0 {
            return Err(GpError::InvalidConfig(format!(
                "jitter policy needs initial_jitter > 0, growth_factor > 1, max_attempts >= 1; got {self:?}"
            )));
        }
        if self.first_attempt > self.max_attempts {
            return Err(GpError::InvalidConfig(format!(
                "first_attempt {} exceeds max_attempts {}",
                self.first_attempt, self.max_attempts
            )));
        }
        Ok(())
    }

    /// Jitter used at schedule index `attempt` (0 = none).
    pub fn jitter_at(&self, attempt: usize) -> f64 {
        if attempt == 0 {
            0.0
        } else {
            self.initial_jitter * self.growth_factor.powi(attempt as i32 - 1)
        }
    }

    /// Same schedule, but skipping the attempts before `attempt`.
    pub fn starting_at(mut self, attempt: usize) -> Self {
        self.first_attempt = attempt;
        self
    }
}

/// Lower-triangular Cholesky factor of `A + jitter_used * I`.
#[derive(Debug, Clone)]
pub struct CholFactor {
    lower: DMatrix<f64>,
    jitter_used: f64,
}

impl CholFactor {
    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn into_lower(self) -> DMatrix<f64> {
        self.lower
    }

    /// `L⁻¹ B`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        self.solve_lower_mut(&mut out);
        out
    }

    pub fn solve_lower_mut(&self, b: &mut DMatrix<f64>) {
        if b.ncols() == 0 || b.nrows() == 0 {
            return;
        }
        let ok = self.lower.solve_lower_triangular_mut(b);
        debug_assert!(ok, "Cholesky factor has a zero diagonal");
    }

    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        if !out.is_empty() {
            self.lower.solve_lower_triangular_mut(&mut out);
        }
        out
    }

    /// `L⁻ᵀ B`.
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        self.solve_upper_mut(&mut out);
        out
    }

    pub fn solve_upper_mut(&self, b: &mut DMatrix<f64>) {
        if b.ncols() == 0 || b.nrows() == 0 {
            return;
        }
        self.lower.tr_solve_lower_triangular_mut(b);
    }

    pub fn solve_upper_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut out = b.clone();
        if !out.is_empty() {
            self.lower.tr_solve_lower_triangular_mut(&mut out);
        }
        out
    }

    /// `(L Lᵀ)⁻¹ B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = self.solve_lower(b);
        self.solve_upper_mut(&mut out);
        out
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.solve_upper_vec(&self.solve_lower_vec(b))
    }

    /// Explicit inverse of `L Lᵀ`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut inv = self.solve(&DMatrix::identity(n, n));
        symmetrize(&mut inv);
        inv
    }

    /// `L Lᵀ`, i.e. the factorized matrix including any jitter.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.lower * self.lower.transpose()
    }
}

/// Overwrites `a` with `(a + aᵀ) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Strict Cholesky of `a + jitter * I` reading only the lower triangle.
///
/// Returns `None` as soon as a pivot is not strictly positive and finite.
pub fn cholesky_with_jitter(a: &DMatrix<f64>, jitter: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut pivot = a[(j, j)] + jitter;
        for k in 0..j {
            let v = l[(j, k)];
            pivot -= v * v;
        }
        if !(pivot > 0.0) || !pivot.is_finite() {
            return None;
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Factorizes the symmetrized `a`, retrying with growing jitter on failure.
pub fn jittered_cholesky(a: &DMatrix<f64>, policy: &JitterPolicy) -> Result<CholFactor> {
    if a.nrows() != a.ncols() {
        return Err(GpError::DimensionMismatch(format!(
            "Cholesky needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut sym = a.clone();
    symmetrize(&mut sym);
    let mut last_jitter = 0.0;
    let mut tried = 0;
    for attempt in policy.first_attempt..=policy.max_attempts {
        let jitter = policy.jitter_at(attempt);
        last_jitter = jitter;
        if attempt > 0 {
            tried += 1;
        }
        if let Some(lower) = cholesky_with_jitter(&sym, jitter) {
            return Ok(CholFactor {
                lower,
                jitter_used: jitter,
            });
        }
    }
    Err(GpError::PositiveDefiniteFailure {
        attempts: tried,
        last_jitter,
    })
}

/// `log |A + jitter_used I| = 2 Σ log L_ii`.
pub fn log_det(factor: &CholFactor) -> f64 {
    2.0 * factor.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}
