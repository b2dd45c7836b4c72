mod common;

use common::{rel_err, rng, Instance};
use gpbench_core::exact_gpr::{lml, lml_gradient};
use gpbench_core::inducing::greedy_variance_select;
use gpbench_core::kernels::{gram, gram_hyper_derivatives, HyperVector, KernelFamily};
use gpbench_core::sgpr::{elbo_gradient, SgprModel};
use nalgebra::DVector;
use rand::Rng;

const STEP: f64 = 1e-5;
const MAX_REL_ERR: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-6;
const PER_FAMILY: usize = 20;

fn central_diff(h: &HyperVector, f: impl Fn(&HyperVector) -> f64) -> DVector<f64> {
    DVector::from_fn(h.len(), |j, _| {
        let mut plus = h.values().clone();
        let mut minus = h.values().clone();
        plus[j] += STEP;
        minus[j] -= STEP;
        (f(&h.with_values(plus)) - f(&h.with_values(minus))) / (2.0 * STEP)
    })
}

fn max_rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&p, &q)| rel_err(p, q, REL_FLOOR))
        .fold(0.0, f64::max)
}

fn instances(seed: u64, n: std::ops::RangeInclusive<usize>) -> Vec<Instance> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for family in KernelFamily::ALL {
        for _ in 0..PER_FAMILY {
            let n = r.random_range(n.clone());
            out.push(Instance::random(family, n, &mut r));
        }
    }
    out
}

#[test]
fn lml_gradient_matches_finite_differences() {
    for (i, inst) in instances(21, 4..=25).iter().enumerate() {
        let h = inst.hypers();
        let analytic = lml_gradient(&inst.x, &inst.y, &h).unwrap();
        let numeric = central_diff(&h, |hv| {
            let (spec, noise) = hv.unpack();
            lml(&inst.x, &inst.y, &spec, noise).unwrap()
        });
        let e = max_rel(&analytic, &numeric);
        assert!(e <= MAX_REL_ERR, "instance {i} ({}): {e:e}", inst.family);
    }
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    let mut r = rng(22);
    for (i, inst) in instances(23, 6..=25).iter().enumerate() {
        let m = r.random_range(2..=inst.x.nrows() / 2);
        let z = greedy_variance_select(&inst.x, &inst.spec, m).gather(&inst.x);
        let h = inst.hypers();
        let analytic = elbo_gradient(&z, &inst.x, &inst.y, &h).unwrap();
        let numeric = central_diff(&h, |hv| {
            let (spec, noise) = hv.unpack();
            SgprModel::new(z.clone(), spec, noise).elbo(&inst.x, &inst.y).unwrap()
        });
        let e = max_rel(&analytic, &numeric);
        assert!(e <= MAX_REL_ERR, "instance {i} ({}): {e:e}", inst.family);
    }
}

#[test]
fn gram_derivatives_match_finite_differences() {
    let mut r = rng(24);
    for (i, inst) in instances(25, 3..=12).iter().enumerate() {
        let x2 = common::random_inputs(r.random_range(1..=6), inst.x.ncols(), &mut r);
        let h = inst.hypers();
        let p = inst.spec.n_hypers();
        for cross in [None, Some(&x2)] {
            let analytic = gram_hyper_derivatives(&inst.spec, &inst.x, cross);
            assert_eq!(analytic.len(), p);
            for j in 0..p {
                let shifted = |delta: f64| {
                    let mut v = h.values().clone();
                    v[j] += delta;
                    gram(&h.with_values(v).unpack().0, &inst.x, cross)
                };
                let numeric = (shifted(STEP) - shifted(-STEP)) / (2.0 * STEP);
                let e = analytic[j]
                    .iter()
                    .zip(numeric.iter())
                    .map(|(&a, &b)| rel_err(a, b, REL_FLOOR))
                    .fold(0.0, f64::max);
                assert!(e <= MAX_REL_ERR, "instance {i} ({}), hyper {j}: {e:e}", inst.family);
            }
        }
    }
}
