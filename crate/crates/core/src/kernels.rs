//! Covariance functions: squared exponential and Matérn with per-dimension
//! lengthscales, and the arc-cosine kernel over a weighted inner product.
//!
//! Hyperparameters are stored constrained (strictly above [`HYPER_FLOOR`]).
//! The optimizer works in an unconstrained space through
//! `raw = HYPER_FLOOR + exp(u)`; see [`HyperVector`].
//!
//! Canonical hyperparameter order, used by every gradient routine:
//!
//! * SE / Matérn: `[signal_variance, lengthscale_1, …, lengthscale_D]`
//! * arc-cosine: `[signal_variance, weight_variance_1, …, weight_variance_D, bias_variance]`
//!
//! [`HyperVector`] appends the noise variance as the last entry.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

/// Hard lower limit on every positive hyperparameter.
pub const HYPER_FLOOR: f64 = 1e-5;

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaternNu {
    Half,
    ThreeHalves,
    FiveHalves,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelFamily {
    SquaredExponential,
    Matern(MaternNu),
    /// Arc-cosine kernel of order 0, 1 or 2.
    ArcCosine(u8),
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 7] = [
        KernelFamily::SquaredExponential,
        KernelFamily::Matern(MaternNu::Half),
        KernelFamily::Matern(MaternNu::ThreeHalves),
        KernelFamily::Matern(MaternNu::FiveHalves),
        KernelFamily::ArcCosine(0),
        KernelFamily::ArcCosine(1),
        KernelFamily::ArcCosine(2),
    ];

    /// Number of kernel hyperparameters (noise excluded) for `dim` inputs.
    pub fn n_hypers(&self, dim: usize) -> usize {
        match self {
            KernelFamily::ArcCosine(_) => dim + 2,
            _ => dim + 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelFamily::SquaredExponential => "se",
            KernelFamily::Matern(MaternNu::Half) => "matern12",
            KernelFamily::Matern(MaternNu::ThreeHalves) => "matern32",
            KernelFamily::Matern(MaternNu::FiveHalves) => "matern52",
            KernelFamily::ArcCosine(0) => "arccos0",
            KernelFamily::ArcCosine(1) => "arccos1",
            KernelFamily::ArcCosine(_) => "arccos2",
        }
    }

    fn hyper_name(&self, index: usize, dim: usize) -> &'static str {
        match (self, index) {
            (_, 0) => "signal_variance",
            (KernelFamily::ArcCosine(_), i) if i == dim + 1 => "bias_variance",
            (KernelFamily::ArcCosine(_), _) => "weight_variance",
            _ => "lengthscale",
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = GpError;

    fn from_str(s: &str) -> Result<Self> {
        KernelFamily::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| GpError::InvalidConfig(format!("unknown kernel `{s}`")))
    }
}

/// A kernel family together with its constrained hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub signal_variance: f64,
    /// Lengthscales (SE, Matérn) or input weight variances (arc-cosine), one per input dimension.
    pub scales: Vec<f64>,
    /// Bias variance of the arc-cosine inner product; unused by the stationary kernels.
    pub bias_variance: f64,
}

impl KernelSpec {
    pub fn squared_exponential(signal_variance: f64, lengthscales: Vec<f64>) -> Self {
        Self {
            family: KernelFamily::SquaredExponential,
            signal_variance,
            scales: lengthscales,
            bias_variance: 0.0,
        }
    }

    pub fn matern(nu: MaternNu, signal_variance: f64, lengthscales: Vec<f64>) -> Self {
        Self {
            family: KernelFamily::Matern(nu),
            signal_variance,
            scales: lengthscales,
            bias_variance: 0.0,
        }
    }

    pub fn arc_cosine(order: u8, signal_variance: f64, weight_variances: Vec<f64>, bias_variance: f64) -> Self {
        Self {
            family: KernelFamily::ArcCosine(order),
            signal_variance,
            scales: weight_variances,
            bias_variance,
        }
    }

    /// Every hyperparameter set to `value`.
    pub fn uniform(family: KernelFamily, dim: usize, value: f64) -> Self {
        let mut spec = Self {
            family,
            signal_variance: value,
            scales: vec![value; dim],
            bias_variance: 0.0,
        };
        if let KernelFamily::ArcCosine(_) = family {
            spec.bias_variance = value;
        }
        spec
    }

    pub fn input_dim(&self) -> usize {
        self.scales.len()
    }

    pub fn n_hypers(&self) -> usize {
        self.family.n_hypers(self.input_dim())
    }

    /// Constrained hyperparameters in canonical order.
    pub fn hypers(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_hypers());
        out.push(self.signal_variance);
        out.extend_from_slice(&self.scales);
        if let KernelFamily::ArcCosine(_) = self.family {
            out.push(self.bias_variance);
        }
        out
    }

    pub fn with_hypers(&self, values: &[f64]) -> Self {
        assert_eq!(values.len(), self.n_hypers());
        let dim = self.input_dim();
        let mut spec = self.clone();
        spec.signal_variance = values[0];
        spec.scales.copy_from_slice(&values[1..=dim]);
        if let KernelFamily::ArcCosine(_) = self.family {
            spec.bias_variance = values[dim + 1];
        }
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if let KernelFamily::ArcCosine(order) = self.family {
            if order > 2 {
                return Err(GpError::InvalidConfig(format!(
                    "arc-cosine order must be 0, 1 or 2, got {order}"
                )));
            }
        }
        if self.scales.is_empty() {
            return Err(GpError::InvalidConfig(
                "kernel needs at least one input dimension".into(),
            ));
        }
        let dim = self.input_dim();
        for (i, v) in self.hypers().into_iter().enumerate() {
            if !(v > HYPER_FLOOR) || !v.is_finite() {
                return Err(GpError::PackDomainError {
                    name: self.family.hyper_name(i, dim),
                    value: v,
                    floor: HYPER_FLOOR,
                });
            }
        }
        Ok(())
    }

    /// `k(x, x2)`.
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> f64 {
        if x == x2 {
            return self.diag(x);
        }
        match self.family {
            KernelFamily::SquaredExponential => self.signal_variance * (-0.5 * self.scaled_sq_dist(x, x2)).exp(),
            KernelFamily::Matern(nu) => self.signal_variance * matern_profile(nu, self.scaled_sq_dist(x, x2).sqrt()),
            KernelFamily::ArcCosine(order) => ArcParts::new(self, order, x, x2).value(),
        }
    }

    /// `k(x, x)`.
    pub fn diag(&self, x: &[f64]) -> f64 {
        match self.family {
            KernelFamily::ArcCosine(order) => {
                let a = self.weighted_inner(x, x);
                if a <= 0.0 {
                    return arc_zero_norm_value(self.signal_variance, order);
                }
                self.signal_variance * a.powi(order as i32) * arc_diag_factor(order)
            }
            _ => self.signal_variance,
        }
    }

    /// `k(x, x2)` plus its derivatives with respect to the constrained
    /// hyperparameters, written into `grad` in canonical order.
    pub fn eval_with_grad(&self, x: &[f64], x2: &[f64], grad: &mut [f64]) -> f64 {
        debug_assert_eq!(grad.len(), self.n_hypers());
        if x == x2 {
            return self.diag_with_grad(x, grad);
        }
        let sf2 = self.signal_variance;
        match self.family {
            KernelFamily::SquaredExponential => {
                let e = (-0.5 * self.scaled_sq_dist(x, x2)).exp();
                let k = sf2 * e;
                grad[0] = e;
                for (d, l) in self.scales.iter().enumerate() {
                    let delta = x[d] - x2[d];
                    grad[1 + d] = k * delta * delta / (l * l * l);
                }
                k
            }
            KernelFamily::Matern(nu) => {
                let r = self.scaled_sq_dist(x, x2).sqrt();
                let profile = matern_profile(nu, r);
                grad[0] = profile;
                // dk/dl_d = sf2 * coef * delta_d^2 / l_d^3
                let coef = matern_dk_dr_over_r(nu, r);
                for (d, l) in self.scales.iter().enumerate() {
                    let delta = x[d] - x2[d];
                    grad[1 + d] = sf2 * coef * delta * delta / (l * l * l);
                }
                sf2 * profile
            }
            KernelFamily::ArcCosine(order) => {
                let parts = ArcParts::new(self, order, x, x2);
                let k = parts.value();
                if parts.degenerate {
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    grad[0] = k / sf2;
                    return k;
                }
                let (dk_ds, dk_da, dk_dc) = parts.partials();
                grad[0] = k / sf2;
                for d in 0..self.input_dim() {
                    grad[1 + d] = dk_ds * x[d] * x2[d] + dk_da * x[d] * x[d] + dk_dc * x2[d] * x2[d];
                }
                grad[1 + self.input_dim()] = dk_ds + dk_da + dk_dc;
                k
            }
        }
    }

    /// `k(x, x)` and its constrained hyperparameter derivatives.
    pub fn diag_with_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        match self.family {
            KernelFamily::ArcCosine(order) => {
                let sf2 = self.signal_variance;
                let a = self.weighted_inner(x, x);
                if a <= 0.0 {
                    let k = arc_zero_norm_value(sf2, order);
                    grad[0] = k / sf2;
                    return k;
                }
                let n = order as i32;
                let factor = arc_diag_factor(order);
                let k = sf2 * a.powi(n) * factor;
                grad[0] = a.powi(n) * factor;
                if n > 0 {
                    let dk_da = sf2 * factor * n as f64 * a.powi(n - 1);
                    for d in 0..self.input_dim() {
                        grad[1 + d] = dk_da * x[d] * x[d];
                    }
                    grad[1 + self.input_dim()] = dk_da;
                }
                k
            }
            _ => {
                grad[0] = 1.0;
                self.signal_variance
            }
        }
    }

    /// Gradient of `k(x, x2)` with respect to the first argument `x`.
    pub fn input_grad(&self, x: &[f64], x2: &[f64], out: &mut [f64]) {
        let sf2 = self.signal_variance;
        match self.family {
            KernelFamily::SquaredExponential => {
                let k = sf2 * (-0.5 * self.scaled_sq_dist(x, x2)).exp();
                for (d, l) in self.scales.iter().enumerate() {
                    out[d] = -k * (x[d] - x2[d]) / (l * l);
                }
            }
            KernelFamily::Matern(nu) => {
                let r = self.scaled_sq_dist(x, x2).sqrt();
                let coef = matern_dk_dr_over_r(nu, r);
                for (d, l) in self.scales.iter().enumerate() {
                    out[d] = -sf2 * coef * (x[d] - x2[d]) / (l * l);
                }
            }
            KernelFamily::ArcCosine(order) => {
                if x == x2 {
                    // Moving one argument off the diagonal: only the norm term of
                    // the first argument changes to first order when n >= 1.
                    self.diag_input_grad(x, out);
                    out.iter_mut().for_each(|g| *g *= 0.5);
                    return;
                }
                let parts = ArcParts::new(self, order, x, x2);
                if parts.degenerate {
                    out.iter_mut().for_each(|g| *g = 0.0);
                    return;
                }
                let (dk_ds, dk_da, _) = parts.partials();
                for (d, w) in self.scales.iter().enumerate() {
                    out[d] = dk_ds * w * x2[d] + dk_da * 2.0 * w * x[d];
                }
            }
        }
    }

    /// Gradient of `k(x, x)` with respect to `x`.
    pub fn diag_input_grad(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|g| *g = 0.0);
        if let KernelFamily::ArcCosine(order) = self.family {
            let a = self.weighted_inner(x, x);
            if order == 0 || a <= 0.0 {
                return;
            }
            let n = order as i32;
            let dk_da = self.signal_variance * arc_diag_factor(order) * n as f64 * a.powi(n - 1);
            for (d, w) in self.scales.iter().enumerate() {
                out[d] = dk_da * 2.0 * w * x[d];
            }
        }
    }

    fn scaled_sq_dist(&self, x: &[f64], x2: &[f64]) -> f64 {
        self.scales
            .iter()
            .zip(x.iter().zip(x2))
            .map(|(l, (a, b))| {
                let t = (a - b) / l;
                t * t
            })
            .sum()
    }

    fn weighted_inner(&self, x: &[f64], x2: &[f64]) -> f64 {
        self.scales
            .iter()
            .zip(x.iter().zip(x2))
            .map(|(w, (a, b))| w * a * b)
            .sum::<f64>()
            + self.bias_variance
    }
}

fn matern_profile(nu: MaternNu, r: f64) -> f64 {
    match nu {
        MaternNu::Half => (-r).exp(),
        MaternNu::ThreeHalves => (1.0 + SQRT3 * r) * (-SQRT3 * r).exp(),
        MaternNu::FiveHalves => (1.0 + SQRT5 * r + 5.0 * r * r / 3.0) * (-SQRT5 * r).exp(),
    }
}

/// `-(1/r) d profile / dr`, with the removable singularity at `r = 0` resolved
/// (and set to 0 for ν = 1/2, whose derivative does not exist there).
fn matern_dk_dr_over_r(nu: MaternNu, r: f64) -> f64 {
    match nu {
        MaternNu::Half => {
            if r > 0.0 {
                (-r).exp() / r
            } else {
                0.0
            }
        }
        MaternNu::ThreeHalves => 3.0 * (-SQRT3 * r).exp(),
        MaternNu::FiveHalves => 5.0 / 3.0 * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp(),
    }
}

/// `J_n(0) / π`.
fn arc_diag_factor(order: u8) -> f64 {
    match order {
        2 => 3.0,
        _ => 1.0,
    }
}

fn arc_zero_norm_value(sf2: f64, order: u8) -> f64 {
    if order == 0 {
        sf2
    } else {
        0.0
    }
}

fn arc_j(order: u8, phi: f64, sin_phi: f64, cos_phi: f64) -> f64 {
    match order {
        0 => PI - phi,
        1 => sin_phi + (PI - phi) * cos_phi,
        _ => 3.0 * sin_phi * cos_phi + (PI - phi) * (1.0 + 2.0 * cos_phi * cos_phi),
    }
}

/// Intermediate quantities of the arc-cosine kernel for a pair of inputs,
/// expressed through `s = <x, x2>`, `a = <x, x>` and `c = <x2, x2>`.
struct ArcParts {
    order: u8,
    sf2: f64,
    a: f64,
    c: f64,
    rho: f64,
    phi: f64,
    sin_phi: f64,
    /// Either input has zero weighted norm.
    degenerate: bool,
}

impl ArcParts {
    fn new(spec: &KernelSpec, order: u8, x: &[f64], x2: &[f64]) -> Self {
        let a = spec.weighted_inner(x, x);
        let c = spec.weighted_inner(x2, x2);
        let s = spec.weighted_inner(x, x2);
        let degenerate = a <= 0.0 || c <= 0.0;
        let rho = if degenerate {
            1.0
        } else {
            (s / (a * c).sqrt()).clamp(-1.0, 1.0)
        };
        let phi = rho.acos();
        Self {
            order,
            sf2: spec.signal_variance,
            a,
            c,
            rho,
            phi,
            sin_phi: (1.0 - rho * rho).max(0.0).sqrt(),
            degenerate,
        }
    }

    fn base(&self) -> f64 {
        (self.a * self.c).powf(0.5 * self.order as f64)
    }

    fn value(&self) -> f64 {
        if self.degenerate {
            return arc_zero_norm_value(self.sf2, self.order);
        }
        self.sf2 / PI * self.base() * arc_j(self.order, self.phi, self.sin_phi, self.rho)
    }

    /// `dJ_n / dρ`.
    fn dj_drho(&self) -> f64 {
        match self.order {
            0 => {
                if self.sin_phi > 0.0 {
                    1.0 / self.sin_phi
                } else {
                    0.0
                }
            }
            1 => PI - self.phi,
            _ => 4.0 * arc_j(1, self.phi, self.sin_phi, self.rho),
        }
    }

    /// `(∂k/∂s, ∂k/∂a, ∂k/∂c)`.
    fn partials(&self) -> (f64, f64, f64) {
        let n = self.order as f64;
        let scale = self.sf2 / PI * self.base();
        let j = arc_j(self.order, self.phi, self.sin_phi, self.rho);
        let dj = self.dj_drho();
        let dk_ds = scale * dj / (self.a * self.c).sqrt();
        let dk_da = scale * (0.5 * n * j - 0.5 * dj * self.rho) / self.a;
        let dk_dc = scale * (0.5 * n * j - 0.5 * dj * self.rho) / self.c;
        (dk_ds, dk_da, dk_dc)
    }
}

/// Copies the rows of `x` into a row-major buffer.
pub(crate) fn row_major(x: &DMatrix<f64>) -> Vec<f64> {
    let (n, d) = x.shape();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            out.push(x[(i, j)]);
        }
    }
    out
}

fn check_dim(spec: &KernelSpec, x: &DMatrix<f64>) {
    assert_eq!(
        x.ncols(),
        spec.input_dim(),
        "input has {} columns but the kernel expects {}",
        x.ncols(),
        spec.input_dim()
    );
}

/// Covariance of a single pair of inputs.
pub fn eval_pair(spec: &KernelSpec, x: &[f64], x2: &[f64]) -> f64 {
    spec.eval(x, x2)
}

/// Gram matrix `K(X, X2)`, or the symmetric `K(X, X)` when `x2` is `None`.
pub fn gram(spec: &KernelSpec, x: &DMatrix<f64>, x2: Option<&DMatrix<f64>>) -> DMatrix<f64> {
    check_dim(spec, x);
    let d = spec.input_dim();
    let rows = row_major(x);
    let n = x.nrows();
    match x2 {
        None => {
            let mut k = DMatrix::zeros(n, n);
            for i in 0..n {
                let xi = &rows[i * d..(i + 1) * d];
                k[(i, i)] = spec.diag(xi);
                for j in 0..i {
                    let v = spec.eval(xi, &rows[j * d..(j + 1) * d]);
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            k
        }
        Some(x2) => {
            check_dim(spec, x2);
            let rows2 = row_major(x2);
            let p = x2.nrows();
            DMatrix::from_fn(n, p, |i, j| {
                spec.eval(&rows[i * d..(i + 1) * d], &rows2[j * d..(j + 1) * d])
            })
        }
    }
}

/// `diag K(X, X)` in O(N).
pub fn gram_diag(spec: &KernelSpec, x: &DMatrix<f64>) -> DVector<f64> {
    check_dim(spec, x);
    let d = spec.input_dim();
    let rows = row_major(x);
    DVector::from_fn(x.nrows(), |i, _| spec.diag(&rows[i * d..(i + 1) * d]))
}

/// `d raw / d u` for each kernel hyperparameter under `raw = floor + exp(u)`.
fn chain_factors(spec: &KernelSpec) -> Vec<f64> {
    spec.hypers().into_iter().map(|v| v - HYPER_FLOOR).collect()
}

/// One matrix `∂K/∂u_j` per unconstrained kernel hyperparameter.
pub fn gram_hyper_derivatives(spec: &KernelSpec, x: &DMatrix<f64>, x2: Option<&DMatrix<f64>>) -> Vec<DMatrix<f64>> {
    check_dim(spec, x);
    let d = spec.input_dim();
    let p = spec.n_hypers();
    let chain = chain_factors(spec);
    let rows = row_major(x);
    let n = x.nrows();
    let mut g = vec![0.0; p];
    match x2 {
        None => {
            let mut out = vec![DMatrix::zeros(n, n); p];
            for i in 0..n {
                let xi = &rows[i * d..(i + 1) * d];
                spec.diag_with_grad(xi, &mut g);
                for h in 0..p {
                    out[h][(i, i)] = g[h] * chain[h];
                }
                for j in 0..i {
                    spec.eval_with_grad(xi, &rows[j * d..(j + 1) * d], &mut g);
                    for h in 0..p {
                        let v = g[h] * chain[h];
                        out[h][(i, j)] = v;
                        out[h][(j, i)] = v;
                    }
                }
            }
            out
        }
        Some(x2) => {
            check_dim(spec, x2);
            let rows2 = row_major(x2);
            let m = x2.nrows();
            let mut out = vec![DMatrix::zeros(n, m); p];
            for i in 0..n {
                for j in 0..m {
                    spec.eval_with_grad(&rows[i * d..(i + 1) * d], &rows2[j * d..(j + 1) * d], &mut g);
                    for h in 0..p {
                        out[h][(i, j)] = g[h] * chain[h];
                    }
                }
            }
            out
        }
    }
}

/// `Σ_ij W_ij ∂K_ij/∂u_h` for every unconstrained kernel hyperparameter `h`,
/// without materializing the derivative matrices.
///
/// With `x2 = None` the pairs range over `K(X, X)` and `weights` must be N×N.
pub fn contract_hyper_grad(
    spec: &KernelSpec,
    x: &DMatrix<f64>,
    x2: Option<&DMatrix<f64>>,
    weights: &DMatrix<f64>,
) -> Vec<f64> {
    check_dim(spec, x);
    let d = spec.input_dim();
    let p = spec.n_hypers();
    let rows = row_major(x);
    let n = x.nrows();
    let mut acc = vec![0.0; p];
    let mut g = vec![0.0; p];
    match x2 {
        None => {
            assert_eq!(weights.shape(), (n, n));
            for i in 0..n {
                let xi = &rows[i * d..(i + 1) * d];
                spec.diag_with_grad(xi, &mut g);
                let w = weights[(i, i)];
                for h in 0..p {
                    acc[h] += w * g[h];
                }
                for j in 0..i {
                    let w = weights[(i, j)] + weights[(j, i)];
                    if w == 0.0 {
                        continue;
                    }
                    spec.eval_with_grad(xi, &rows[j * d..(j + 1) * d], &mut g);
                    for h in 0..p {
                        acc[h] += w * g[h];
                    }
                }
            }
        }
        Some(x2) => {
            check_dim(spec, x2);
            let rows2 = row_major(x2);
            let m = x2.nrows();
            assert_eq!(weights.shape(), (n, m));
            for i in 0..n {
                let xi = &rows[i * d..(i + 1) * d];
                for j in 0..m {
                    let w = weights[(i, j)];
                    if w == 0.0 {
                        continue;
                    }
                    spec.eval_with_grad(xi, &rows2[j * d..(j + 1) * d], &mut g);
                    for h in 0..p {
                        acc[h] += w * g[h];
                    }
                }
            }
        }
    }
    for (a, c) in acc.iter_mut().zip(chain_factors(spec)) {
        *a *= c;
    }
    acc
}

/// `Σ_i w_i ∂k(x_i, x_i)/∂u_h`.
pub fn contract_diag_hyper_grad(spec: &KernelSpec, x: &DMatrix<f64>, weights: &DVector<f64>) -> Vec<f64> {
    check_dim(spec, x);
    let d = spec.input_dim();
    let p = spec.n_hypers();
    let rows = row_major(x);
    let mut acc = vec![0.0; p];
    let mut g = vec![0.0; p];
    for i in 0..x.nrows() {
        spec.diag_with_grad(&rows[i * d..(i + 1) * d], &mut g);
        for h in 0..p {
            acc[h] += weights[i] * g[h];
        }
    }
    for (a, c) in acc.iter_mut().zip(chain_factors(spec)) {
        *a *= c;
    }
    acc
}

/// Gradient of `Σ_ij W_ij k(z_i, x_j)` with respect to the rows of `Z`.
pub fn contract_input_grad(
    spec: &KernelSpec,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
    weights: &DMatrix<f64>,
) -> DMatrix<f64> {
    check_dim(spec, z);
    check_dim(spec, x);
    let d = spec.input_dim();
    let (m, n) = (z.nrows(), x.nrows());
    assert_eq!(weights.shape(), (m, n));
    let zr = row_major(z);
    let xr = row_major(x);
    let mut out = DMatrix::zeros(m, d);
    let mut g = vec![0.0; d];
    for i in 0..m {
        let zi = &zr[i * d..(i + 1) * d];
        for j in 0..n {
            let w = weights[(i, j)];
            if w == 0.0 {
                continue;
            }
            spec.input_grad(zi, &xr[j * d..(j + 1) * d], &mut g);
            for k in 0..d {
                out[(i, k)] += w * g[k];
            }
        }
    }
    out
}

/// Gradient of `Σ_ij W_ij k(z_i, z_j)` with respect to the rows of `Z`, for symmetric `W`.
pub fn contract_sym_input_grad(spec: &KernelSpec, z: &DMatrix<f64>, weights: &DMatrix<f64>) -> DMatrix<f64> {
    check_dim(spec, z);
    let d = spec.input_dim();
    let m = z.nrows();
    assert_eq!(weights.shape(), (m, m));
    let zr = row_major(z);
    let mut out = DMatrix::zeros(m, d);
    let mut g = vec![0.0; d];
    for i in 0..m {
        let zi = &zr[i * d..(i + 1) * d];
        spec.diag_input_grad(zi, &mut g);
        for k in 0..d {
            out[(i, k)] += weights[(i, i)] * g[k];
        }
        for j in 0..m {
            if j == i {
                continue;
            }
            let w = weights[(i, j)] + weights[(j, i)];
            if w == 0.0 {
                continue;
            }
            spec.input_grad(zi, &zr[j * d..(j + 1) * d], &mut g);
            for k in 0..d {
                out[(i, k)] += w * g[k];
            }
        }
    }
    out
}

/// Map a constrained value to the unconstrained optimizer space.
pub fn to_unconstrained(raw: f64) -> f64 {
    (raw - HYPER_FLOOR).ln()
}

/// Inverse of [`to_unconstrained`]; the result is always strictly above the floor.
pub fn to_constrained(u: f64) -> f64 {
    (HYPER_FLOOR + u.exp()).max(HYPER_FLOOR.next_up())
}

/// Unconstrained kernel and noise hyperparameters, the optimizer's native space.
///
/// The last entry is the noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperVector {
    family: KernelFamily,
    dim: usize,
    values: DVector<f64>,
}

impl HyperVector {
    pub fn from_values(family: KernelFamily, dim: usize, values: DVector<f64>) -> Self {
        assert_eq!(values.len(), family.n_hypers(dim) + 1);
        Self { family, dim, values }
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: DVector<f64>) -> Self {
        Self::from_values(self.family, self.dim, values)
    }

    /// Constrained `(kernel, noise_variance)`.
    pub fn unpack(&self) -> (KernelSpec, f64) {
        let raw: Vec<f64> = self.values.iter().map(|&u| to_constrained(u)).collect();
        let p = raw.len() - 1;
        let template = KernelSpec::uniform(self.family, self.dim, 1.0);
        (template.with_hypers(&raw[..p]), raw[p])
    }
}

/// Unconstrained representation of `(spec, noise_variance)`.
pub fn pack(spec: &KernelSpec, noise_variance: f64) -> Result<HyperVector> {
    spec.validate()?;
    if !(noise_variance > HYPER_FLOOR) || !noise_variance.is_finite() {
        return Err(GpError::PackDomainError {
            name: "noise_variance",
            value: noise_variance,
            floor: HYPER_FLOOR,
        });
    }
    let mut values: Vec<f64> = spec.hypers().into_iter().map(to_unconstrained).collect();
    values.push(to_unconstrained(noise_variance));
    Ok(HyperVector::from_values(
        spec.family,
        spec.input_dim(),
        DVector::from_vec(values),
    ))
}

/// `d raw / d u` evaluated from the unconstrained value.
pub fn constrain_derivative(u: f64) -> f64 {
    u.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn se_values() {
        let k = KernelSpec::squared_exponential(2.5, vec![0.3, 4.0]);
        assert_eq!(k.eval(&[0.1, 0.2], &[0.1, 0.2]), 2.5);
        let k = KernelSpec::squared_exponential(1.0, vec![1.0]);
        assert!(close(k.eval(&[0.0], &[1.0]), (-0.5f64).exp(), 1e-15));
    }

    #[test]
    fn matern_half_value() {
        let k = KernelSpec::matern(MaternNu::Half, 1.0, vec![1.0]);
        assert!(close(k.eval(&[0.0], &[1.0]), (-1.0f64).exp(), 1e-15));
    }

    #[test]
    fn matern_family_at_zero_distance() {
        for nu in [MaternNu::Half, MaternNu::ThreeHalves, MaternNu::FiveHalves] {
            let k = KernelSpec::matern(nu, 1.7, vec![0.4, 2.0]);
            assert_eq!(k.eval(&[0.3, -1.0], &[0.3, -1.0]), 1.7);
            // limit as r -> 0 through a distinct pair
            assert!(close(k.eval(&[0.3, -1.0], &[0.3 + 1e-12, -1.0]), 1.7, 1e-9));
        }
    }

    #[test]
    fn arc_cosine_orthogonal_and_diagonal() {
        let sf2 = 1.3;
        let k = KernelSpec::arc_cosine(1, sf2, vec![1.0, 1.0], 0.0);
        assert!(close(k.eval(&[1.0, 0.0], &[0.0, 1.0]), sf2 / PI, 1e-14));
        assert!(close(k.diag(&[1.0, 0.0]), sf2, 1e-14));
        let kd = gram_diag(&k, &dmatrix![1.0, 0.0]);
        assert!(close(kd[0], sf2, 1e-14));
    }

    #[test]
    fn arc_cosine_zero_norm_convention() {
        let x = [0.0, 0.0];
        let y = [0.5, -1.0];
        for order in 1..=2 {
            let k = KernelSpec::arc_cosine(order, 2.0, vec![1.0, 1.0], 0.0);
            assert_eq!(k.eval(&x, &y), 0.0);
            assert_eq!(k.diag(&x), 0.0);
        }
        let k0 = KernelSpec::arc_cosine(0, 2.0, vec![1.0, 1.0], 0.0);
        assert_eq!(k0.eval(&x, &y), 2.0);
        assert_eq!(k0.diag(&x), 2.0);
    }

    #[test]
    fn arc_cosine_weighted_inner_product_reduces_to_plain() {
        let x = [0.4, -1.2, 0.7];
        let y = [1.1, 0.3, -0.5];
        let k = KernelSpec::arc_cosine(1, 1.0, vec![1.0; 3], 0.0);
        let dot: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let nx: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
        let phi = (dot / (nx * ny)).acos();
        let expected = nx * ny * (phi.sin() + (PI - phi) * phi.cos()) / PI;
        assert!(close(k.eval(&x, &y), expected, 1e-14));
    }

    #[test]
    fn gram_two_points() {
        let k = KernelSpec::squared_exponential(1.0, vec![1.0]);
        let x = dmatrix![0.0; 1.0];
        let g = gram(&k, &x, None);
        let e = (-0.5f64).exp();
        assert!((g - dmatrix![1.0, e; e, 1.0]).amax() < 1e-15);
        let g1 = gram(&k, &dmatrix![0.3], None);
        assert_eq!(g1.shape(), (1, 1));
        assert_eq!(g1[(0, 0)], 1.0);
    }

    #[test]
    fn se_derivative_at_coincident_points() {
        let k = KernelSpec::squared_exponential(2.0, vec![0.7]);
        let x = dmatrix![0.25];
        let d = gram_hyper_derivatives(&k, &x, None);
        assert!(close(d[0][(0, 0)], 2.0 - HYPER_FLOOR, 1e-15));
        assert_eq!(d[1][(0, 0)], 0.0);
    }

    #[test]
    fn pack_examples() {
        assert!(close(to_unconstrained(1.0 + HYPER_FLOOR), 0.0, 1e-15));
        assert!(close(to_constrained(0.0), 1.00001, 1e-15));
        let low = to_constrained(-50.0);
        assert!(low > HYPER_FLOOR && close(low, HYPER_FLOOR, 1e-20));

        let spec = KernelSpec::squared_exponential(1.0, vec![1.0, 2.0]);
        let hv = pack(&spec, 0.01).unwrap();
        let (back, noise) = hv.unpack();
        assert!(close(noise, 0.01, 0.01 * 1e-12));
        for (a, b) in back.hypers().iter().zip(spec.hypers()) {
            assert!(close(*a, b, b * 1e-12));
        }
    }

    #[test]
    fn pack_rejects_floor() {
        let spec = KernelSpec::squared_exponential(1.0, vec![HYPER_FLOOR]);
        assert!(matches!(
            pack(&spec, 0.1),
            Err(GpError::PackDomainError {
                name: "lengthscale",
                ..
            })
        ));
        let spec = KernelSpec::squared_exponential(1.0, vec![1.0]);
        assert!(matches!(
            pack(&spec, 1e-6),
            Err(GpError::PackDomainError {
                name: "noise_variance",
                ..
            })
        ));
    }

    #[test]
    fn family_names_round_trip() {
        for f in KernelFamily::ALL {
            assert_eq!(f.name().parse::<KernelFamily>().unwrap(), f);
        }
        assert!("rbf".parse::<KernelFamily>().is_err());
    }
}
