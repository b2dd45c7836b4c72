mod common;

use gpbench_core::data::{train_size, StandardizedDataset};
use gpbench_core::kernels::{gram, pack, KernelFamily, KernelSpec, HYPER_FLOOR};
use gpbench_core::metrics::{nlpd, rmse};
use gpbench_core::numerics::{jittered_cholesky, JitterPolicy};
use gpbench_core::sgpr::{guarded_trace, SgprModel, TraceOutcome, TRACE_REL_TOL};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

fn family() -> impl Strategy<Value = KernelFamily> {
    (0..KernelFamily::ALL.len()).prop_map(|i| KernelFamily::ALL[i])
}

fn spec_and_inputs(max_n: usize) -> impl Strategy<Value = (KernelSpec, DMatrix<f64>)> {
    (family(), 1usize..=3, 2usize..=max_n).prop_flat_map(|(fam, d, n)| {
        (
            0.2f64..4.0,
            prop::collection::vec(0.3f64..3.0, d),
            0.05f64..2.0,
            prop::collection::vec(-3.0f64..3.0, n * d),
        )
            .prop_map(move |(sv, scales, bias, xs)| {
                let mut spec = KernelSpec::uniform(fam, d, 1.0);
                spec.signal_variance = sv;
                spec.scales = scales;
                if let KernelFamily::ArcCosine(_) = fam {
                    spec.bias_variance = bias;
                }
                (spec, DMatrix::from_row_slice(n, d, &xs))
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pack_unpack_round_trip((spec, _x) in spec_and_inputs(3), noise in 1e-4f64..10.0) {
        let (back, noise_back) = pack(&spec, noise).unwrap().unpack();
        for (a, b) in spec.hypers().iter().zip(back.hypers()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
        prop_assert!((noise - noise_back).abs() <= 1e-12 * noise.max(1.0));
        prop_assert!(back.hypers().iter().all(|&v| v > HYPER_FLOOR));
    }

    #[test]
    fn gram_is_symmetric_psd_with_matching_diagonal((spec, x) in spec_and_inputs(12)) {
        let k = gram(&spec, &x, None);
        prop_assert!((&k - k.transpose()).amax() <= 1e-12 * k.amax().max(1.0));
        let eig = SymmetricEigen::new(k.clone()).eigenvalues;
        prop_assert!(eig.min() >= -1e-9 * k.trace().max(1.0));
        for i in 0..x.nrows() {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            prop_assert!((spec.diag(&row) - k[(i, i)]).abs() <= 1e-12 * k[(i, i)].abs().max(1.0));
        }
    }

    #[test]
    fn elbo_never_exceeds_upper_bound((spec, x) in spec_and_inputs(20), noise in 0.01f64..1.0, m in 1usize..8) {
        let n = x.nrows();
        let y = DVector::from_fn(n, |i, _| (x[(i, 0)] * 1.7).sin());
        let z = x.rows(0, m.min(n)).into_owned();
        let b = SgprModel::new(z, spec, noise).bounds(&x, &y).unwrap();
        prop_assert!(b.elbo <= b.upper_bound + 1e-8 * n as f64);
        prop_assert!(b.trace_t >= 0.0);
    }

    #[test]
    fn jittered_cholesky_reconstructs(n in 1usize..10, seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let a = common::random_inputs(n, n + 2, &mut r);
        let spd = &a * a.transpose();
        let f = jittered_cholesky(&spd, &JitterPolicy::default()).unwrap();
        prop_assert_eq!(f.jitter_used(), 0.0);
        prop_assert!((f.reconstruct() - &spd).amax() <= 1e-10 * spd.amax().max(1.0));
    }

    #[test]
    fn trace_guard_classifies_by_relative_size(scale in 1.0f64..1e4, frac in -1e-3f64..1e-3) {
        let t = frac * scale;
        let out = guarded_trace(scale + t, scale, scale);
        if t >= 0.0 {
            prop_assert!(matches!(out, TraceOutcome::Exact(_)));
        } else if -t <= 0.5 * TRACE_REL_TOL * scale {
            prop_assert_eq!(out, TraceOutcome::Clamped);
        } else if -t >= 2.0 * TRACE_REL_TOL * scale {
            prop_assert!(out.is_failed());
        }
    }

    #[test]
    fn split_is_deterministic_and_standardized(n in 10usize..80, seed in any::<u64>()) {
        let mut r = common::rng(seed ^ 7);
        let x = common::random_inputs(n, 2, &mut r);
        let y = DVector::from_fn(n, |i, _| x[(i, 0)] - 2.0 * x[(i, 1)] + 5.0);
        let a = StandardizedDataset::from_raw(x.clone(), y.clone(), seed, "p").unwrap();
        let b = StandardizedDataset::from_raw(x, y, seed, "p").unwrap();
        prop_assert_eq!(&a.x_train, &b.x_train);
        prop_assert_eq!(&a.y_test, &b.y_test);
        prop_assert_eq!(a.n_train(), train_size(n));
        prop_assert_eq!(a.n_train() + a.n_test(), n);
        prop_assert!(a.y_train.mean().abs() <= 1e-10);
        let var = a.y_train.map(|v| v * v).mean();
        prop_assert!((var - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn metrics_of_perfect_prediction(ys in prop::collection::vec(-5.0f64..5.0, 1..30), var in 0.01f64..4.0) {
        let y = DVector::from_vec(ys);
        prop_assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        let v = DVector::from_element(y.len(), var);
        let expected = 0.5 * (2.0 * std::f64::consts::PI * var).ln();
        prop_assert!((nlpd(&y, &v, &y).unwrap() - expected).abs() <= 1e-12);
    }
}
