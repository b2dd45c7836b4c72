//! Exact Gaussian-process regression with a zero mean function.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{GpError, Result};
use crate::kernels::{self, constrain_derivative, gram, gram_diag, HyperVector, KernelSpec};
use crate::numerics::{jittered_cholesky, log_det, CholFactor, JitterPolicy};

/// Predictive variances below `-VARIANCE_ROUNDING_TOL * max(1, prior)` are treated as bugs.
pub const VARIANCE_ROUNDING_TOL: f64 = 1e-10;

fn check_data(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(GpError::DimensionMismatch("no training points".into()));
    }
    if x.nrows() != y.len() {
        return Err(GpError::DimensionMismatch(format!(
            "{} inputs but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(GpError::non_finite("targets contain non-finite values"));
    }
    Ok(())
}

fn noisy_gram(spec: &KernelSpec, x: &DMatrix<f64>, noise: f64) -> DMatrix<f64> {
    let mut k = gram(spec, x, None);
    for i in 0..k.nrows() {
        k[(i, i)] += noise;
    }
    k
}

fn factorize(spec: &KernelSpec, x: &DMatrix<f64>, noise: f64, jitter: &JitterPolicy) -> Result<CholFactor> {
    jittered_cholesky(&noisy_gram(spec, x, noise), jitter).map_err(|e| GpError::non_finite(format!("K + σ²I: {e}")))
}

fn lml_from_factor(chol: &CholFactor, y: &DVector<f64>) -> (f64, DVector<f64>) {
    let n = y.len() as f64;
    let v = chol.solve_lower_vec(y);
    let alpha = chol.solve_upper_vec(&v);
    let value = -0.5 * n * (2.0 * PI).ln() - 0.5 * v.norm_squared() - 0.5 * log_det(chol);
    (value, alpha)
}

/// Log marginal likelihood `log N(y | 0, K + σ²I)`.
pub fn lml(x: &DMatrix<f64>, y: &DVector<f64>, spec: &KernelSpec, noise: f64) -> Result<f64> {
    lml_with_policy(x, y, spec, noise, &JitterPolicy::default())
}

pub fn lml_with_policy(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    spec: &KernelSpec,
    noise: f64,
    jitter: &JitterPolicy,
) -> Result<f64> {
    check_data(x, y)?;
    let chol = factorize(spec, x, noise, jitter)?;
    let (value, _) = lml_from_factor(&chol, y);
    if !value.is_finite() {
        return Err(GpError::non_finite("log marginal likelihood"));
    }
    Ok(value)
}

/// LML and its gradient with respect to the unconstrained hyperparameters.
pub fn lml_and_gradient(x: &DMatrix<f64>, y: &DVector<f64>, hyper: &HyperVector) -> Result<(f64, DVector<f64>)> {
    check_data(x, y)?;
    let (spec, noise) = hyper.unpack();
    let chol = factorize(&spec, x, noise, &JitterPolicy::default())?;
    let (value, alpha) = lml_from_factor(&chol, y);
    if !value.is_finite() {
        return Err(GpError::non_finite("log marginal likelihood"));
    }
    // W = ααᵀ - (K + σ²I)⁻¹; ∂LML/∂θ = ½ tr(W ∂K/∂θ)
    let mut w = chol.inverse();
    w.neg_mut();
    w.ger(1.0, &alpha, &alpha, 1.0);

    let half_w = &w * 0.5;
    let mut grad = kernels::contract_hyper_grad(&spec, x, None, &half_w);
    let u_noise = hyper.values()[hyper.len() - 1];
    grad.push(0.5 * w.trace() * constrain_derivative(u_noise));
    let grad = DVector::from_vec(grad);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(GpError::non_finite("log marginal likelihood gradient"));
    }
    Ok((value, grad))
}

/// Gradient of the LML with respect to the unconstrained hyperparameters.
pub fn lml_gradient(x: &DMatrix<f64>, y: &DVector<f64>, hyper: &HyperVector) -> Result<DVector<f64>> {
    lml_and_gradient(x, y, hyper).map(|(_, g)| g)
}

/// Latent and observation predictive moments at a batch of test points.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: DVector<f64>,
    pub latent_variance: DVector<f64>,
    pub observation_variance: DVector<f64>,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Clamps rounding-level negative variances to zero and rejects real negatives.
pub(crate) fn clamp_variance(v: f64, prior: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v)
    } else if v >= -VARIANCE_ROUNDING_TOL * prior.abs().max(1.0) {
        Ok(0.0)
    } else {
        Err(GpError::InternalConsistency(format!(
            "predictive variance {v:e} is negative beyond rounding"
        )))
    }
}

/// Exact posterior conditioned on the training data.
#[derive(Debug, Clone)]
pub struct GprPosterior {
    x: DMatrix<f64>,
    spec: KernelSpec,
    noise: f64,
    chol: CholFactor,
    alpha: DVector<f64>,
}

impl GprPosterior {
    pub fn fit(x: &DMatrix<f64>, y: &DVector<f64>, spec: &KernelSpec, noise: f64) -> Result<Self> {
        check_data(x, y)?;
        let chol = factorize(spec, x, noise, &JitterPolicy::default())?;
        let alpha = chol.solve_vec(y);
        Ok(Self {
            x: x.clone(),
            spec: spec.clone(),
            noise,
            chol,
            alpha,
        })
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn chol(&self) -> &CholFactor {
        &self.chol
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn training_inputs(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn predict(&self, x_star: &DMatrix<f64>) -> Result<Prediction> {
        let p = x_star.nrows();
        if p == 0 {
            return Ok(Prediction {
                mean: DVector::zeros(0),
                latent_variance: DVector::zeros(0),
                observation_variance: DVector::zeros(0),
            });
        }
        let k_xs = gram(&self.spec, &self.x, Some(x_star));
        let mean = k_xs.tr_mul(&self.alpha);
        let v = self.chol.solve_lower(&k_xs);
        let prior = gram_diag(&self.spec, x_star);
        let mut latent = DVector::zeros(p);
        for j in 0..p {
            let raw = prior[j] - v.column(j).norm_squared();
            latent[j] = clamp_variance(raw, prior[j])?;
        }
        let observation = latent.add_scalar(self.noise);
        Ok(Prediction {
            mean,
            latent_variance: latent,
            observation_variance: observation,
        })
    }
}

/// Convenience wrapper for [`GprPosterior::predict`].
pub fn gpr_predict(posterior: &GprPosterior, x_star: &DMatrix<f64>) -> Result<Prediction> {
    posterior.predict(x_star)
}
