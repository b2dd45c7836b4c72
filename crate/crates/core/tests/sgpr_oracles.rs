mod common;

use common::{add_diag, dense_lml, nystrom, rng, Instance};
use gpbench_core::exact_gpr::{gpr_predict, lml, GprPosterior};
use gpbench_core::inducing::greedy_variance_select;
use gpbench_core::kernels::{gram, gram_diag, KernelFamily};
use gpbench_core::sgpr::{sgpr_predict, SgprModel};
use rand::seq::index::sample;
use rand::Rng;

#[test]
fn elbo_below_lml_below_upper_bound() {
    let mut r = rng(11);
    for case in 0..105 {
        let family = KernelFamily::ALL[case % KernelFamily::ALL.len()];
        let n = r.random_range(5..=50);
        let inst = Instance::random(family, n, &mut r);
        let m = r.random_range(1..=n);
        let idx = sample(&mut r, n, m).into_vec();
        let model = SgprModel::new(inst.x.select_rows(&idx), inst.spec.clone(), inst.noise);
        let b = model.bounds(&inst.x, &inst.y).unwrap();
        let exact = lml(&inst.x, &inst.y, &inst.spec, inst.noise).unwrap();
        let slack = 1e-8 * n as f64;
        assert!(
            b.elbo <= exact + slack,
            "case {case} {family}: elbo {} > lml {exact}",
            b.elbo
        );
        assert!(
            exact <= b.upper_bound + slack,
            "case {case} {family}: lml {exact} > upper {}",
            b.upper_bound
        );
        assert!(b.kl_gap_bound >= -slack, "case {case}: gap {}", b.kl_gap_bound);
    }
}

#[test]
fn complete_inducing_set_recovers_exact_gpr() {
    let mut r = rng(12);
    for case in 0..21 {
        let family = KernelFamily::ALL[case % KernelFamily::ALL.len()];
        let n = r.random_range(5..=60);
        let inst = Instance::random(family, n, &mut r);
        let model = SgprModel::new(inst.x.clone(), inst.spec.clone(), inst.noise);
        let exact = lml(&inst.x, &inst.y, &inst.spec, inst.noise).unwrap();
        let elbo = model.elbo(&inst.x, &inst.y).unwrap();
        assert!(
            (elbo - exact).abs() <= 1e-6 * exact.abs(),
            "case {case}: {elbo} vs {exact}"
        );

        let xs = common::random_inputs(15, inst.x.ncols(), &mut r);
        let post = GprPosterior::fit(&inst.x, &inst.y, &inst.spec, inst.noise).unwrap();
        let a = gpr_predict(&post, &xs).unwrap();
        let b = sgpr_predict(&model, &inst.x, &inst.y, &xs).unwrap();
        assert!((a.mean - b.mean).amax() <= 1e-5, "case {case}: mean");
        assert!(
            (a.latent_variance - b.latent_variance).amax() <= 1e-5,
            "case {case}: variance"
        );
    }
}

#[test]
fn elbo_nondecreasing_along_greedy_prefixes() {
    let mut r = rng(13);
    for case in 0..21 {
        let family = KernelFamily::ALL[case % KernelFamily::ALL.len()];
        let n = r.random_range(10..=50);
        let inst = Instance::random(family, n, &mut r);
        let sel = greedy_variance_select(&inst.x, &inst.spec, n);
        let tol = 1e-8 * n as f64;
        let mut prev = f64::NEG_INFINITY;
        for m in 1..=sel.len() {
            let z = inst.x.select_rows(&sel.indices[..m]);
            let elbo = SgprModel::new(z, inst.spec.clone(), inst.noise)
                .elbo(&inst.x, &inst.y)
                .unwrap();
            assert!(elbo >= prev - tol, "case {case} m {m}: {elbo} < {prev}");
            prev = elbo;
        }
    }
}

#[test]
fn matches_dense_nystrom_oracle() {
    let mut r = rng(14);
    for case in 0..28 {
        let family = KernelFamily::ALL[case % KernelFamily::ALL.len()];
        let n = r.random_range(5..=50);
        let inst = Instance::random(family, n, &mut r);
        let m = r.random_range(1..=n.min(12));
        let sel = greedy_variance_select(&inst.x, &inst.spec, m);
        let z = sel.gather(&inst.x);
        let model = SgprModel::new(z.clone(), inst.spec.clone(), inst.noise);

        let q = nystrom(&inst.spec, &z, &inst.x, &inst.x);
        let t = gram_diag(&inst.spec, &inst.x).sum() - q.trace();
        let elbo = dense_lml(&add_diag(q.clone(), inst.noise), &inst.y) - 0.5 * t / inst.noise;
        let log_det = 2.0
            * add_diag(q.clone(), inst.noise)
                .cholesky()
                .unwrap()
                .l()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();
        let quad_t = {
            let c = add_diag(q.clone(), inst.noise + t);
            inst.y.dot(&c.cholesky().unwrap().solve(&inst.y))
        };
        let upper = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det - 0.5 * quad_t;

        let b = model.bounds(&inst.x, &inst.y).unwrap();
        assert!((b.elbo - elbo).abs() <= 1e-8, "case {case}: elbo {} vs {elbo}", b.elbo);
        assert!(
            (b.upper_bound - upper).abs() <= 1e-8,
            "case {case}: upper {} vs {upper}",
            b.upper_bound
        );

        let xs = common::random_inputs(10, inst.x.ncols(), &mut r);
        let qsf = nystrom(&inst.spec, &z, &xs, &inst.x);
        let chol = add_diag(q, inst.noise).cholesky().unwrap();
        let mean = &qsf * chol.solve(&inst.y);
        let qss = nystrom(&inst.spec, &z, &xs, &xs);
        let kss = gram(&inst.spec, &xs, None);
        let var = (kss - &qss + &qss - &qsf * chol.solve(&qsf.transpose())).diagonal();
        let p = sgpr_predict(&model, &inst.x, &inst.y, &xs).unwrap();
        assert!((p.mean - mean).amax() <= 1e-8, "case {case}: mean");
        assert!((p.latent_variance - var).amax() <= 1e-8, "case {case}: variance");
    }
}
