//! Uncollapsed stochastic variational GP with an explicit Gaussian `q(u) = N(m, S)`.
//!
//! `S = R Rᵀ` with `R` lower triangular. The optimizer sees `R`'s diagonal
//! through a softplus so the factor stays non-singular.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::exact_gpr::{clamp_variance, Prediction};
use crate::kernels::{
    constrain_derivative, contract_diag_hyper_grad, contract_hyper_grad, contract_input_grad, contract_sym_input_grad,
    gram, gram_diag, pack, HyperVector, KernelSpec,
};
use crate::numerics::{jittered_cholesky, log_det, CholFactor, JitterPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct SvgpParams {
    pub z: DMatrix<f64>,
    pub q_mu: DVector<f64>,
    /// Lower-triangular factor of the variational covariance.
    pub q_sqrt: DMatrix<f64>,
    pub spec: KernelSpec,
    pub noise_variance: f64,
}

impl SvgpParams {
    /// `m = 0`, `S = I`.
    pub fn new(z: DMatrix<f64>, spec: KernelSpec, noise_variance: f64) -> Self {
        let m = z.nrows();
        Self {
            z,
            q_mu: DVector::zeros(m),
            q_sqrt: DMatrix::identity(m, m),
            spec,
            noise_variance,
        }
    }

    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn q_cov(&self) -> DMatrix<f64> {
        &self.q_sqrt * self.q_sqrt.transpose()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.z.nrows();
        if m == 0 || self.q_mu.len() != m || self.q_sqrt.shape() != (m, m) || self.z.ncols() != self.spec.input_dim() {
            return Err(GpError::DimensionMismatch(format!(
                "inconsistent variational shapes: Z {:?}, m {}, factor {:?}",
                self.z.shape(),
                self.q_mu.len(),
                self.q_sqrt.shape()
            )));
        }
        if (0..m).any(|i| !(self.q_sqrt[(i, i)] > 0.0)) {
            return Err(GpError::InvalidConfig(
                "variational factor needs a positive diagonal".into(),
            ));
        }
        self.spec.validate()
    }

    /// Sets `(m, S)` to the maximizer of the full-batch ELBO for the current `Z` and hyperparameters.
    pub fn with_optimal_q(mut self, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        let (q_mu, q_cov) = optimal_q(&self.z, &self.spec, self.noise_variance, x, y)?;
        self.q_mu = q_mu;
        self.q_sqrt = jittered_cholesky(&q_cov, &JitterPolicy::default())?.into_lower();
        Ok(self)
    }
}

/// Closed-form optimal `(m, S)`: with `Σ = K_ZZ + σ⁻² K_ZX K_XZ`,
/// `S = K_ZZ Σ⁻¹ K_ZZ` and `m = σ⁻² K_ZZ Σ⁻¹ K_ZX y`.
pub fn optimal_q(
    z: &DMatrix<f64>,
    spec: &KernelSpec,
    noise: f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let kuu = gram(spec, z, None);
    let kuf = gram(spec, z, Some(x));
    let sigma = &kuu + (&kuf * kuf.transpose()) / noise;
    let chol = jittered_cholesky(&sigma, &JitterPolicy::default())?;
    let s = &kuu * chol.solve(&kuu);
    let m = &kuu * chol.solve_vec(&(&kuf * y)) / noise;
    Ok((m, s))
}

/// `E_{N(f | μ, s)}[log N(y | f, σ²)]`.
pub fn expected_log_likelihood(y: f64, mu: f64, s: f64, noise: f64) -> f64 {
    -0.5 * (2.0 * PI * noise).ln() - (y - mu) * (y - mu) / (2.0 * noise) - s / (2.0 * noise)
}

struct Prior {
    chol: CholFactor,
}

impl Prior {
    fn new(params: &SvgpParams) -> Result<Self> {
        let kuu = gram(&params.spec, &params.z, None);
        let chol =
            jittered_cholesky(&kuu, &JitterPolicy::default()).map_err(|e| GpError::non_finite(format!("K_ZZ: {e}")))?;
        Ok(Self { chol })
    }

    /// `KL[N(m, S) || N(0, K_ZZ)]`.
    fn kl(&self, params: &SvgpParams) -> f64 {
        let m = params.num_inducing() as f64;
        let l_inv_r = self.chol.solve_lower(&params.q_sqrt);
        let l_inv_m = self.chol.solve_lower_vec(&params.q_mu);
        let log_det_s: f64 = 2.0
            * (0..params.num_inducing())
                .map(|i| params.q_sqrt[(i, i)].ln())
                .sum::<f64>();
        0.5 * (l_inv_r.norm_squared() + l_inv_m.norm_squared() - m + log_det(&self.chol) - log_det_s)
    }
}

/// Marginals of `q(f)` at a batch of inputs, plus intermediates for the gradient.
struct Marginals {
    /// `K_ZZ⁻¹ K_ZX`.
    a: DMatrix<f64>,
    mean: DVector<f64>,
    var: DVector<f64>,
}

fn marginals(params: &SvgpParams, prior: &Prior, x: &DMatrix<f64>) -> Marginals {
    let kuf = gram(&params.spec, &params.z, Some(x));
    let a = prior.chol.solve(&kuf);
    let mean = a.tr_mul(&params.q_mu);
    let kff = gram_diag(&params.spec, x);
    let rt_a = params.q_sqrt.tr_mul(&a);
    let var = DVector::from_fn(x.nrows(), |i, _| {
        kff[i] - a.column(i).dot(&kuf.column(i)) + rt_a.column(i).norm_squared()
    });
    Marginals { a, mean, var }
}

fn check_batch(params: &SvgpParams, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() || x.nrows() == 0 {
        return Err(GpError::DimensionMismatch(format!(
            "batch has {} inputs and {} targets",
            x.nrows(),
            y.len()
        )));
    }
    if x.ncols() != params.z.ncols() {
        return Err(GpError::DimensionMismatch(format!(
            "batch has {} columns, inducing inputs {}",
            x.ncols(),
            params.z.ncols()
        )));
    }
    Ok(())
}

/// `scale · Σ_batch E_q[log p(y_i | f_i)] − KL[q(u) || p(u)]`.
pub fn svgp_elbo_minibatch(params: &SvgpParams, x: &DMatrix<f64>, y: &DVector<f64>, scale: f64) -> Result<f64> {
    check_batch(params, x, y)?;
    let prior = Prior::new(params)?;
    let marg = marginals(params, &prior, x);
    let ell: f64 = (0..y.len())
        .map(|i| expected_log_likelihood(y[i], marg.mean[i], marg.var[i], params.noise_variance))
        .sum();
    let value = scale * ell - prior.kl(params);
    if !value.is_finite() {
        return Err(GpError::non_finite("SVGP ELBO"));
    }
    Ok(value)
}

/// Full-batch ELBO.
pub fn svgp_elbo(params: &SvgpParams, x: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    svgp_elbo_minibatch(params, x, y, 1.0)
}

pub fn kl_divergence(params: &SvgpParams) -> Result<f64> {
    Ok(Prior::new(params)?.kl(params))
}

pub fn svgp_predict(params: &SvgpParams, x_star: &DMatrix<f64>) -> Result<Prediction> {
    if x_star.nrows() == 0 {
        return Ok(Prediction {
            mean: DVector::zeros(0),
            latent_variance: DVector::zeros(0),
            observation_variance: DVector::zeros(0),
        });
    }
    let prior = Prior::new(params)?;
    let marg = marginals(params, &prior, x_star);
    let kss = gram_diag(&params.spec, x_star);
    let mut latent = marg.var;
    for i in 0..latent.len() {
        latent[i] = clamp_variance(latent[i], kss[i])?;
    }
    if marg.mean.iter().any(|v| !v.is_finite()) {
        return Err(GpError::non_finite("SVGP predictive mean"));
    }
    Ok(Prediction {
        mean: marg.mean,
        observation_variance: latent.add_scalar(params.noise_variance),
        latent_variance: latent,
    })
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Flat unconstrained layout: `[Z (row-major), m, lower(R) (row-major, softplus⁻¹ on the diagonal), hypers]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SvgpLayout {
    pub m: usize,
    pub d: usize,
    pub n_hypers: usize,
}

impl SvgpLayout {
    pub fn of(params: &SvgpParams) -> Self {
        Self {
            m: params.num_inducing(),
            d: params.z.ncols(),
            n_hypers: params.spec.n_hypers() + 1,
        }
    }

    pub fn len(&self) -> usize {
        self.m * self.d + self.m + self.m * (self.m + 1) / 2 + self.n_hypers
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self, params: &SvgpParams) -> Result<DVector<f64>> {
        let mut v = Vec::with_capacity(self.len());
        for i in 0..self.m {
            for k in 0..self.d {
                v.push(params.z[(i, k)]);
            }
        }
        v.extend(params.q_mu.iter());
        for i in 0..self.m {
            for j in 0..=i {
                let r = params.q_sqrt[(i, j)];
                v.push(if i == j { softplus_inverse(r) } else { r });
            }
        }
        v.extend(pack(&params.spec, params.noise_variance)?.values().iter());
        Ok(DVector::from_vec(v))
    }

    pub fn unflatten(&self, template: &SvgpParams, v: &DVector<f64>) -> SvgpParams {
        assert_eq!(v.len(), self.len());
        let mut it = v.iter().copied();
        let mut z = DMatrix::zeros(self.m, self.d);
        for i in 0..self.m {
            for k in 0..self.d {
                z[(i, k)] = it.next().unwrap();
            }
        }
        let q_mu = DVector::from_iterator(self.m, it.by_ref().take(self.m));
        let mut q_sqrt = DMatrix::zeros(self.m, self.m);
        for i in 0..self.m {
            for j in 0..=i {
                let r = it.next().unwrap();
                q_sqrt[(i, j)] = if i == j { softplus(r) } else { r };
            }
        }
        let hv = pack(&template.spec, template.noise_variance)
            .expect("template hyperparameters are valid")
            .with_values(DVector::from_iterator(self.n_hypers, it));
        let (spec, noise_variance) = hv.unpack();
        SvgpParams {
            z,
            q_mu,
            q_sqrt,
            spec,
            noise_variance,
        }
    }
}

/// Minibatch ELBO and its gradient in the [`SvgpLayout`] parameterization.
pub fn svgp_elbo_and_gradient(
    params: &SvgpParams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    scale: f64,
) -> Result<(f64, DVector<f64>)> {
    check_batch(params, x, y)?;
    let layout = SvgpLayout::of(params);
    let (m_ind, d) = (layout.m, layout.d);
    let noise = params.noise_variance;
    let prior = Prior::new(params)?;
    let marg = marginals(params, &prior, x);
    let b = y.len();

    let r = y - &marg.mean;
    let ell: f64 = (0..b)
        .map(|i| expected_log_likelihood(y[i], marg.mean[i], marg.var[i], noise))
        .sum();
    let value = scale * ell - prior.kl(params);
    if !value.is_finite() {
        return Err(GpError::non_finite("SVGP ELBO"));
    }

    let c = scale / noise;
    let a = &marg.a;
    let s = params.q_cov();
    let kuu_inv = prior.chol.inverse();
    let beta = prior.chol.solve_vec(&params.q_mu);
    let s_a = &s * a;
    let bm = prior.chol.solve(&s_a);
    let ar = a * &r;

    // ∂E/∂K_ZX
    let mut g_uf = a - &bm;
    g_uf.ger(1.0, &beta, &r, 1.0);
    g_uf *= c;

    // ∂E/∂K_ZZ
    let kinv_s_kinv = prior.chol.solve(&prior.chol.solve(&s).transpose());
    let mut g_uu = (&bm * a.transpose()) * c - (a * a.transpose()) * (0.5 * c);
    g_uu.ger(-c, &ar, &beta, 1.0);
    g_uu += (kinv_s_kinv - &kuu_inv) * 0.5;
    g_uu.ger(0.5, &beta, &beta, 1.0);
    let g_uu = (&g_uu + g_uu.transpose()) * 0.5;

    // ∂E/∂k(x_i, x_i)
    let g_ff = DVector::from_element(b, -0.5 * c);

    let mut grad = Vec::with_capacity(layout.len());

    let gz = contract_input_grad(&params.spec, &params.z, x, &g_uf)
        + contract_sym_input_grad(&params.spec, &params.z, &g_uu);
    for i in 0..m_ind {
        for k in 0..d {
            grad.push(gz[(i, k)]);
        }
    }

    let g_m = &ar * c - &beta;
    grad.extend(g_m.iter());

    // ∂E/∂S = -c/2 A Aᵀ - ½ K⁻¹ + ½ S⁻¹; the S⁻¹ part maps to diag(1/R_ii).
    let g_s_no_inv = (a * a.transpose()) * (-0.5 * c) - &kuu_inv * 0.5;
    let g_r = (&g_s_no_inv * &params.q_sqrt) * 2.0;
    for i in 0..m_ind {
        for j in 0..=i {
            if i == j {
                let rii = params.q_sqrt[(i, i)];
                let raw = softplus_inverse(rii);
                grad.push((g_r[(i, i)] + 1.0 / rii) * sigmoid(raw));
            } else {
                grad.push(g_r[(i, j)]);
            }
        }
    }

    let mut g_h = contract_hyper_grad(&params.spec, &params.z, Some(x), &g_uf);
    for (acc, v) in g_h
        .iter_mut()
        .zip(contract_hyper_grad(&params.spec, &params.z, None, &g_uu))
    {
        *acc += v;
    }
    for (acc, v) in g_h.iter_mut().zip(contract_diag_hyper_grad(&params.spec, x, &g_ff)) {
        *acc += v;
    }
    grad.extend(g_h);

    let d_noise: f64 = (0..b)
        .map(|i| -0.5 / noise + (r[i] * r[i] + marg.var[i]) / (2.0 * noise * noise))
        .sum::<f64>()
        * scale;
    let u_noise = pack(&params.spec, noise)?.values()[layout.n_hypers - 1];
    grad.push(d_noise * constrain_derivative(u_noise));

    let grad = DVector::from_vec(grad);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(GpError::non_finite("SVGP ELBO gradient"));
    }
    Ok((value, grad))
}

/// Reduce-on-plateau learning-rate schedule for a maximized quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 10,
            factor: 0.95,
            threshold: 0.0,
            min_lr: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    config: PlateauConfig,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig) -> Self {
        Self {
            config,
            best: f64::NEG_INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one epoch's metric and returns the learning rate to use next.
    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        let improved = if self.best == f64::NEG_INFINITY {
            metric > self.best
        } else {
            metric > self.best + self.config.threshold * self.best.abs()
        };
        if improved {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.config.patience {
            self.bad_epochs = 0;
            return (lr * self.config.factor).max(self.config.min_lr);
        }
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvgpTrainConfig {
    /// Clipped to the dataset size.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub total_steps: usize,
    pub scheduler: Option<PlateauConfig>,
    pub seed: u64,
}

impl Default for SvgpTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10_000,
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            total_steps: 20_000,
            scheduler: Some(PlateauConfig::default()),
            seed: 0,
        }
    }
}

impl SvgpTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(GpError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(GpError::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(GpError::InvalidConfig("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Steps completed when the epoch ended.
    pub steps: usize,
    pub full_elbo: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SvgpTrace {
    /// Minibatch ELBO at each step, before the update; NaN for skipped steps.
    pub step_elbo: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
    pub skipped_steps: usize,
}

impl SvgpTrace {
    pub fn final_elbo(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.full_elbo)
    }
}

struct Adam {
    m: DVector<f64>,
    v: DVector<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: DVector::zeros(n),
            v: DVector::zeros(n),
            t: 0,
        }
    }

    /// Ascent step on `theta` along gradient `g`.
    fn step(&mut self, theta: &mut DVector<f64>, g: &DVector<f64>, lr: f64, cfg: &SvgpTrainConfig) {
        self.t += 1;
        self.m = &self.m * cfg.beta1 + g * (1.0 - cfg.beta1);
        self.v = &self.v * cfg.beta2 + g.component_mul(g) * (1.0 - cfg.beta2);
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..theta.len() {
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            theta[i] += lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

/// Trains every SVGP parameter with Adam on shuffled minibatches.
///
/// Steps whose loss or gradient is not finite leave the parameters unchanged;
/// more than 10% of them is a [`GpError::TrainingFailure`].
pub fn train_svgp(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    init: &SvgpParams,
    config: &SvgpTrainConfig,
) -> Result<(SvgpParams, SvgpTrace)> {
    config.validate()?;
    init.validate()?;
    check_batch(init, x, y)?;
    let n = x.nrows();
    let batch = config.batch_size.min(n);
    let layout = SvgpLayout::of(init);
    let mut theta = layout.flatten(init)?;
    let mut adam = Adam::new(theta.len());
    let mut lr = config.learning_rate;
    let mut scheduler = config.scheduler.map(PlateauScheduler::new);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = SvgpTrace::default();
    let max_skipped = config.total_steps / 10;

    let mut step = 0;
    let mut epoch = 0;
    while step < config.total_steps {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            if step >= config.total_steps {
                break;
            }
            let xb = x.select_rows(chunk);
            let yb = y.select_rows(chunk);
            let scale = n as f64 / chunk.len() as f64;
            let params = layout.unflatten(init, &theta);
            match svgp_elbo_and_gradient(&params, &xb, &yb, scale) {
                Ok((v, g)) => {
                    trace.step_elbo.push(v);
                    adam.step(&mut theta, &g, lr, config);
                }
                Err(_) => {
                    trace.step_elbo.push(f64::NAN);
                    trace.skipped_steps += 1;
                    if trace.skipped_steps > max_skipped {
                        return Err(GpError::TrainingFailure(format!(
                            "{} of {} SVGP steps had a non-finite objective",
                            trace.skipped_steps, config.total_steps
                        )));
                    }
                }
            }
            step += 1;
        }
        epoch += 1;
        let full = svgp_elbo(&layout.unflatten(init, &theta), x, y).unwrap_or(f64::NAN);
        if let Some(s) = scheduler.as_mut() {
            lr = s.step(full, lr);
        }
        trace.epochs.push(EpochSummary {
            epoch,
            steps: step,
            full_elbo: full,
            learning_rate: lr,
        });
    }
    Ok((layout.unflatten(init, &theta), trace))
}

/// Convenience: greedy-initialized inducing inputs with hyperparameters from `hypers`.
pub fn init_params(x: &DMatrix<f64>, hypers: &HyperVector, m: usize) -> SvgpParams {
    let (spec, noise) = hypers.unpack();
    let sel = crate::inducing::greedy_variance_select(x, &spec, m);
    SvgpParams::new(sel.gather(x), spec, noise)
}
