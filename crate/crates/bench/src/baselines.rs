//! Reference predictors that need no kernel: ordinary least squares and the training mean.

use std::f64::consts::PI;

use gpbench_core::data::StandardizedDataset;
use gpbench_core::metrics::{nlpd, rmse, MetricError};
use nalgebra::{DMatrix, DVector};

/// Ridge penalty used when the least-squares normal equations are singular.
pub const RIDGE_FALLBACK: f64 = 1e-8;

/// Smallest noise variance reported, so exact fits still give a finite NLPD.
pub const MIN_NOISE_VARIANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TrivialFit {
    pub rmse: f64,
    pub nlpd: f64,
    /// Gaussian log likelihood of the training targets under the fitted model.
    pub train_log_likelihood: f64,
    pub noise_variance: f64,
    pub ridge_used: bool,
}

fn gaussian_train_loglik(n: usize, sse: f64, var: f64) -> f64 {
    -0.5 * n as f64 * (2.0 * PI * var).ln() - sse / (2.0 * var)
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(0, 1.0)
}

/// Cholesky factor, unless a pivot is negligible relative to the largest diagonal entry.
fn well_conditioned_cholesky(gram: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let scale = gram.diagonal().max();
    let chol = gram.clone().cholesky()?;
    let min_pivot = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v * v));
    (min_pivot > 1e-12 * scale).then_some(chol)
}

/// Least-squares fit with an intercept and maximum-likelihood noise.
pub fn linear_baseline(data: &StandardizedDataset) -> Result<TrivialFit, MetricError> {
    let design = with_intercept(&data.x_train);
    let gram = design.tr_mul(&design);
    let rhs = design.tr_mul(&data.y_train);
    let (coef, ridge_used) = match well_conditioned_cholesky(&gram) {
        Some(c) => (c.solve(&rhs), false),
        None => {
            let p = gram.nrows();
            let ridged = gram + DMatrix::identity(p, p) * RIDGE_FALLBACK;
            let c = ridged
                .cholesky()
                .expect("ridge-regularized Gram matrix is positive definite");
            (c.solve(&rhs), true)
        }
    };
    let resid = &data.y_train - &design * &coef;
    let sse = resid.norm_squared();
    let n = data.n_train();
    let var = (sse / n as f64).max(MIN_NOISE_VARIANCE);

    let pred = with_intercept(&data.x_test) * &coef;
    let pred_var = DVector::from_element(pred.len(), var);
    Ok(TrivialFit {
        rmse: rmse(&pred, &data.y_test)?,
        nlpd: nlpd(&pred, &pred_var, &data.y_test)?,
        train_log_likelihood: gaussian_train_loglik(n, sse, var),
        noise_variance: var,
        ridge_used,
    })
}

/// Predicts the training mean with the training variance everywhere.
pub fn constant_baseline(data: &StandardizedDataset) -> Result<TrivialFit, MetricError> {
    let n = data.n_train();
    let mean = data.y_train.mean();
    let sse: f64 = data.y_train.iter().map(|v| (v - mean) * (v - mean)).sum();
    let var = (sse / n as f64).max(MIN_NOISE_VARIANCE);
    let pred = DVector::from_element(data.n_test(), mean);
    let pred_var = DVector::from_element(data.n_test(), var);
    Ok(TrivialFit {
        rmse: rmse(&pred, &data.y_test)?,
        nlpd: nlpd(&pred, &pred_var, &data.y_test)?,
        train_log_likelihood: gaussian_train_loglik(n, sse, var),
        noise_variance: var,
        ridge_used: false,
    })
}
