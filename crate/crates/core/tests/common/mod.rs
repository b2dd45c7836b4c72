#![allow(dead_code)]

use gpbench_core::kernels::{gram, pack, HyperVector, KernelFamily, KernelSpec};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_spec(family: KernelFamily, dim: usize, rng: &mut ChaCha8Rng) -> KernelSpec {
    let mut spec = KernelSpec::uniform(family, dim, 1.0);
    spec.signal_variance = rng.random_range(0.3..3.0);
    match family {
        KernelFamily::ArcCosine(_) => {
            spec.scales = (0..dim).map(|_| rng.random_range(0.3..2.0)).collect();
            spec.bias_variance = rng.random_range(0.1..1.0);
        }
        _ => spec.scales = (0..dim).map(|_| rng.random_range(0.4..3.0)).collect(),
    }
    spec
}

pub fn random_inputs(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, dim, |_, _| rng.random_range(-2.0..2.0))
}

/// Targets from a smooth random function plus Gaussian-ish noise.
pub fn random_targets(x: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let w: Vec<f64> = (0..x.ncols()).map(|_| rng.random_range(-1.5..1.5)).collect();
    let phase = rng.random_range(0.0..6.0);
    DVector::from_fn(x.nrows(), |i, _| {
        let s: f64 = (0..x.ncols()).map(|j| w[j] * x[(i, j)]).sum();
        (s + phase).sin() + 0.3 * s + 0.1 * (rng.random::<f64>() - 0.5)
    })
}

pub struct Instance {
    pub family: KernelFamily,
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub spec: KernelSpec,
    pub noise: f64,
}

impl Instance {
    pub fn random(family: KernelFamily, n: usize, rng: &mut ChaCha8Rng) -> Self {
        let dim = rng.random_range(1..=3);
        let x = random_inputs(n, dim, rng);
        let y = random_targets(&x, rng);
        let spec = random_spec(family, dim, rng);
        let noise = rng.random_range(0.02..0.5);
        Self {
            family,
            x,
            y,
            spec,
            noise,
        }
    }

    pub fn hypers(&self) -> HyperVector {
        pack(&self.spec, self.noise).unwrap()
    }
}

/// Exact log marginal likelihood by a dense Cholesky, independent of the crate's solvers.
pub fn dense_lml(cov: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let chol = cov
        .clone()
        .cholesky()
        .expect("oracle covariance must be positive definite");
    let alpha = chol.solve(y);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det - 0.5 * y.dot(&alpha)
}

/// `Q_AB = K_AZ K_ZZ⁻¹ K_ZB` through nalgebra's own Cholesky.
pub fn nystrom(spec: &KernelSpec, z: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let chol = gram(spec, z, None).cholesky().expect("K_ZZ positive definite");
    let va = chol.l().solve_lower_triangular(&gram(spec, z, Some(a))).unwrap();
    let vb = chol.l().solve_lower_triangular(&gram(spec, z, Some(b))).unwrap();
    va.transpose() * vb
}

pub fn add_diag(mut a: DMatrix<f64>, v: f64) -> DMatrix<f64> {
    for i in 0..a.nrows() {
        a[(i, i)] += v;
    }
    a
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
