//! Collapsed sparse variational GP regression.
//!
//! All bounds and predictions go through the M×M "inner Cholesky" route and
//! never form an N×N matrix: with `L Lᵀ = K_ZZ`, `A = L⁻¹ K_ZX / σ` and
//! `B = I + A Aᵀ`, the Nyström covariance is `Q_XX + σ²I = σ² (AᵀA + I)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::exact_gpr::{clamp_variance, Prediction};
use crate::kernels::{self, constrain_derivative, gram, gram_diag, HyperVector, KernelSpec};
use crate::numerics::{jittered_cholesky, log_det, CholFactor, JitterPolicy};

/// Relative tolerance of the trace guard, as a fraction of `tr(K_XX)`.
pub const TRACE_REL_TOL: f64 = 1e-6;

/// Result of guarding `t = tr(K_XX - Q_XX)` against rounding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraceOutcome {
    /// `t >= 0` as computed.
    Exact(f64),
    /// A small negative value set to zero.
    Clamped,
    /// A negative value too large to be rounding; the objective is unusable.
    Failed,
}

impl TraceOutcome {
    /// The guarded value; NaN when the guard failed.
    pub fn value(&self) -> f64 {
        match *self {
            TraceOutcome::Exact(v) => v,
            TraceOutcome::Clamped => 0.0,
            TraceOutcome::Failed => f64::NAN,
        }
    }

    pub fn is_failed(&self) -> bool {
        matches!(self, TraceOutcome::Failed)
    }
}

/// Guards `t = k_diag_sum - q_diag_sum` using the scale `k_scale = tr(K_XX)`.
pub fn guarded_trace(k_diag_sum: f64, q_diag_sum: f64, k_scale: f64) -> TraceOutcome {
    let t = k_diag_sum - q_diag_sum;
    if t >= 0.0 {
        TraceOutcome::Exact(t)
    } else if t >= -TRACE_REL_TOL * k_scale {
        TraceOutcome::Clamped
    } else {
        TraceOutcome::Failed
    }
}

/// ELBO, upper bound and the gap between them for one model state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub elbo: f64,
    pub upper_bound: f64,
    /// Guarded `tr(K_XX - Q_XX)`.
    pub trace_t: f64,
    /// `upper_bound - elbo`, which bounds `KL[q || posterior]` from above.
    pub kl_gap_bound: f64,
}

/// Inducing inputs plus kernel and noise hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SgprModel {
    pub z: DMatrix<f64>,
    pub spec: KernelSpec,
    pub noise_variance: f64,
    pub jitter: JitterPolicy,
}

/// Quantities shared by the bound, gradient and prediction code.
struct Collapsed {
    n: usize,
    noise: f64,
    kuu_chol: CholFactor,
    /// `L⁻¹ K_ZX / σ`, M×N.
    a: DMatrix<f64>,
    aat: DMatrix<f64>,
    b_chol: CholFactor,
    /// `A y`.
    ay: DVector<f64>,
    /// `L_B⁻¹ A y / σ`.
    c: DVector<f64>,
    yty: f64,
    trace: TraceOutcome,
}

impl Collapsed {
    fn new(model: &SgprModel, kuf: &DMatrix<f64>, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        let m = model.z.nrows();
        let noise = model.noise_variance;
        let sigma = noise.sqrt();
        let kuu = gram(&model.spec, &model.z, None);
        let kuu_chol = jittered_cholesky(&kuu, &model.jitter).map_err(|e| GpError::non_finite(format!("K_ZZ: {e}")))?;
        let mut a = kuu_chol.solve_lower(kuf);
        a /= sigma;
        let aat = &a * a.transpose();
        let mut b = aat.clone();
        for i in 0..m {
            b[(i, i)] += 1.0;
        }
        let b_chol = jittered_cholesky(&b, &model.jitter).map_err(|e| GpError::non_finite(format!("I + AAᵀ: {e}")))?;
        let ay = &a * y;
        let c = b_chol.solve_lower_vec(&ay) / sigma;
        let k_diag_sum = gram_diag(&model.spec, x).sum();
        let q_diag_sum = noise * a.norm_squared();
        let trace = guarded_trace(k_diag_sum, q_diag_sum, k_diag_sum);
        Ok(Self {
            n: y.len(),
            noise,
            kuu_chol,
            a,
            aat,
            b_chol,
            ay,
            c,
            yty: y.norm_squared(),
            trace,
        })
    }

    /// `log |Q_XX + σ²I|`.
    fn log_det_q(&self) -> f64 {
        log_det(&self.b_chol) + self.n as f64 * self.noise.ln()
    }

    fn elbo(&self) -> Result<f64> {
        if self.trace.is_failed() {
            return Err(GpError::non_finite("trace term tr(K - Q) is negative beyond rounding"));
        }
        let n = self.n as f64;
        let t = self.trace.value();
        let value = -0.5 * n * (2.0 * PI).ln()
            - 0.5 * self.log_det_q()
            - 0.5 * (self.yty / self.noise - self.c.norm_squared())
            - 0.5 * t / self.noise;
        if !value.is_finite() {
            return Err(GpError::non_finite("ELBO"));
        }
        Ok(value)
    }

    fn upper_bound(&self, jitter: &JitterPolicy) -> Result<f64> {
        if self.trace.is_failed() {
            return Err(GpError::non_finite("trace term tr(K - Q) is negative beyond rounding"));
        }
        if self.trace.value() == 0.0 {
            return self.elbo();
        }
        let n = self.n as f64;
        let st = self.noise + self.trace.value();
        let m = self.aat.nrows();
        let mut bt = &self.aat * (self.noise / st);
        for i in 0..m {
            bt[(i, i)] += 1.0;
        }
        let bt_chol = jittered_cholesky(&bt, jitter)
            .map_err(|e| GpError::non_finite(format!("upper-bound inner system: {e}")))?;
        let ct = bt_chol.solve_lower_vec(&self.ay) * (self.noise.sqrt() / st);
        let quad = self.yty / st - ct.norm_squared();
        let value = -0.5 * n * (2.0 * PI).ln() - 0.5 * self.log_det_q() - 0.5 * quad;
        if !value.is_finite() {
            return Err(GpError::non_finite("upper bound"));
        }
        Ok(value)
    }
}

impl SgprModel {
    pub fn new(z: DMatrix<f64>, spec: KernelSpec, noise_variance: f64) -> Self {
        Self {
            z,
            spec,
            noise_variance,
            jitter: JitterPolicy::default(),
        }
    }

    pub fn with_jitter(mut self, jitter: JitterPolicy) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }

    fn check(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
        if x.nrows() != y.len() {
            return Err(GpError::DimensionMismatch(format!(
                "{} inputs but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        if self.z.nrows() == 0 || x.nrows() == 0 {
            return Err(GpError::DimensionMismatch("empty inducing set or dataset".into()));
        }
        if self.z.ncols() != x.ncols() || x.ncols() != self.spec.input_dim() {
            return Err(GpError::DimensionMismatch(format!(
                "inducing inputs have {} columns, data {}, kernel {}",
                self.z.ncols(),
                x.ncols(),
                self.spec.input_dim()
            )));
        }
        Ok(())
    }

    fn collapse(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Collapsed> {
        self.check(x, y)?;
        let kuf = gram(&self.spec, &self.z, Some(x));
        Collapsed::new(self, &kuf, x, y)
    }

    /// Guarded `tr(K_XX - Q_XX)`.
    pub fn trace_term(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<TraceOutcome> {
        Ok(self.collapse(x, y)?.trace)
    }

    pub fn elbo(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
        self.collapse(x, y)?.elbo()
    }

    pub fn upper_bound(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
        self.collapse(x, y)?.upper_bound(&self.jitter)
    }

    pub fn bounds(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<BoundReport> {
        let col = self.collapse(x, y)?;
        let elbo = col.elbo()?;
        let upper_bound = col.upper_bound(&self.jitter)?;
        Ok(BoundReport {
            elbo,
            upper_bound,
            trace_t: col.trace.value(),
            kl_gap_bound: upper_bound - elbo,
        })
    }

    /// `upper_bound - elbo`.
    pub fn kl_gap_bound(&self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
        self.bounds(x, y).map(|b| b.kl_gap_bound)
    }

    pub fn predict(&self, x: &DMatrix<f64>, y: &DVector<f64>, x_star: &DMatrix<f64>) -> Result<Prediction> {
        let col = self.collapse(x, y)?;
        let p = x_star.nrows();
        if p == 0 {
            return Ok(Prediction {
                mean: DVector::zeros(0),
                latent_variance: DVector::zeros(0),
                observation_variance: DVector::zeros(0),
            });
        }
        let kus = gram(&self.spec, &self.z, Some(x_star));
        let tmp1 = col.kuu_chol.solve_lower(&kus);
        let tmp2 = col.b_chol.solve_lower(&tmp1);
        let mean = tmp2.tr_mul(&col.c);
        let prior = gram_diag(&self.spec, x_star);
        let mut latent = DVector::zeros(p);
        for j in 0..p {
            let raw = prior[j] - tmp1.column(j).norm_squared() + tmp2.column(j).norm_squared();
            latent[j] = clamp_variance(raw, prior[j])?;
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(GpError::non_finite("predictive mean"));
        }
        let observation = latent.add_scalar(self.noise_variance);
        Ok(Prediction {
            mean,
            latent_variance: latent,
            observation_variance: observation,
        })
    }
}

pub fn elbo(model: &SgprModel, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    model.elbo(x, y)
}

pub fn upper_bound(model: &SgprModel, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    model.upper_bound(x, y)
}

pub fn kl_gap_bound(model: &SgprModel, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    model.kl_gap_bound(x, y)
}

pub fn sgpr_predict(
    model: &SgprModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    x_star: &DMatrix<f64>,
) -> Result<Prediction> {
    model.predict(x, y, x_star)
}

/// ELBO and its gradient with respect to the unconstrained kernel and noise
/// hyperparameters, with the inducing inputs `z` held fixed.
pub fn elbo_and_gradient(
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    hyper: &HyperVector,
    jitter: &JitterPolicy,
) -> Result<(f64, DVector<f64>)> {
    let (spec, noise) = hyper.unpack();
    let model = SgprModel::new(z.clone(), spec, noise).with_jitter(*jitter);
    model.check(x, y)?;
    let kuf = gram(&model.spec, z, Some(x));
    let col = Collapsed::new(&model, &kuf, x, y)?;
    let value = col.elbo()?;

    let n = y.len();
    let m = z.nrows();
    let sigma = noise.sqrt();

    // P = K_ZZ⁻¹ K_ZX = σ L⁻ᵀ A
    let mut p = col.kuu_chol.solve_upper(&col.a);
    p *= sigma;
    // B⁻¹ A, then P Σ⁻¹ = σ⁻¹ L⁻ᵀ B⁻¹ A
    let binv_a = col.b_chol.solve(&col.a);
    let mut p_sinv = col.kuu_chol.solve_upper(&binv_a);
    p_sinv /= sigma;
    // α = Σ⁻¹ y = σ⁻² (y - σ Aᵀ L_B⁻ᵀ c)
    let lbt_c = col.b_chol.solve_upper_vec(&col.c);
    let alpha = (y - col.a.tr_mul(&lbt_c) * sigma) / noise;
    let p_alpha = &p * &alpha;

    // P W with W = Σ⁻¹ - ααᵀ
    let mut pw = p_sinv;
    pw.ger(-1.0, &p_alpha, &alpha, 1.0);

    let trace_active = matches!(col.trace, TraceOutcome::Exact(_));
    let mut g_uf = -&pw;
    let mut g_uu = &pw * p.transpose() * 0.5;
    if trace_active {
        g_uf += &p / noise;
        g_uu -= &p * p.transpose() / (2.0 * noise);
    }

    let mut grad = kernels::contract_hyper_grad(&model.spec, z, Some(x), &g_uf);
    let grad_uu = kernels::contract_hyper_grad(&model.spec, z, None, &g_uu);
    for (g, h) in grad.iter_mut().zip(grad_uu) {
        *g += h;
    }
    if trace_active {
        let g_ff = DVector::from_element(n, -0.5 / noise);
        let grad_ff = kernels::contract_diag_hyper_grad(&model.spec, x, &g_ff);
        for (g, h) in grad.iter_mut().zip(grad_ff) {
            *g += h;
        }
    }

    // tr Σ⁻¹ = σ⁻² (N - M + tr B⁻¹)
    let lb_inv = col.b_chol.solve_lower(&DMatrix::identity(m, m));
    let tr_sinv = (n as f64 - m as f64 + lb_inv.norm_squared()) / noise;
    let t = col.trace.value();
    let d_noise = -0.5 * (tr_sinv - alpha.norm_squared()) + t / (2.0 * noise * noise);
    let u_noise = hyper.values()[hyper.len() - 1];
    grad.push(d_noise * constrain_derivative(u_noise));

    let grad = DVector::from_vec(grad);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(GpError::non_finite("ELBO gradient"));
    }
    Ok((value, grad))
}

/// Gradient of the ELBO with respect to the unconstrained hyperparameters.
pub fn elbo_gradient(
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    hyper: &HyperVector,
) -> Result<DVector<f64>> {
    elbo_and_gradient(z, x, y, hyper, &JitterPolicy::default()).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn trace_guard_cases() {
        assert_eq!(guarded_trace(5.0, 5.0, 5.0), TraceOutcome::Exact(0.0));
        assert_eq!(guarded_trace(1000.0, 1000.0 + 1e-12, 1000.0), TraceOutcome::Clamped);
        assert_eq!(guarded_trace(0.0, 1e-12, 1000.0).value(), 0.0);
        let failed = guarded_trace(0.0, 10.0, 1000.0);
        assert!(failed.is_failed() && failed.value().is_nan());
        assert_eq!(guarded_trace(3.0, 1.0, 3.0), TraceOutcome::Exact(2.0));
    }

    #[test]
    fn far_prediction_reverts_to_prior() {
        let spec = KernelSpec::squared_exponential(1.4, vec![0.5]);
        let x = dmatrix![0.0; 0.2; 0.5; 1.0; 1.3];
        let y = DVector::from_vec(vec![0.1, 0.5, -0.2, 0.7, 0.3]);
        let model = SgprModel::new(dmatrix![0.2; 1.0], spec, 0.1);
        let p = model.predict(&x, &y, &dmatrix![80.0]).unwrap();
        assert!(p.mean[0].abs() < 1e-8);
        assert!((p.latent_variance[0] - 1.4).abs() < 1e-8);
    }

    #[test]
    fn dimension_checks() {
        let spec = KernelSpec::squared_exponential(1.0, vec![1.0]);
        let model = SgprModel::new(dmatrix![0.0], spec, 0.1);
        assert!(model.elbo(&dmatrix![0.0; 1.0], &DVector::from_vec(vec![1.0])).is_err());
    }
}
