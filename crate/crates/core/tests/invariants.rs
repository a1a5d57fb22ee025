// End-to-end invariants over randomly seeded designs.

use fcm_core::designs::SimulationSpec;
use fcm_core::downsample::to_flm;
use fcm_core::estimator::{assemble, fit, FitOptions, Solver};
use fcm_core::identifiability::{gram_spectrum, quadratic_form};
use fcm_core::model::sse;
use proptest::prelude::*;

fn spec(seed: u64, cov_seed: u64) -> SimulationSpec {
    serde_json::from_value(serde_json::json!({
        "covariates": [{"kind": "filtered_noise", "bandwidth": 30, "modes": 120,
                        "domain_length": 3, "step": 0.03125, "seed": cov_seed}],
        "lags": [0.5],
        "beta": {"intercept": 0.3, "kernels": [{"kind": "tapered", "coefficients": [1, 0.5]}]},
        "noise": {"kind": "white", "sd": 0.05},
        "n": 3, "seed": seed
    }))
    .unwrap()
}

fn counterexample(seed: u64) -> SimulationSpec {
    serde_json::from_value(serde_json::json!({
        "covariates": [{"kind": "orthogonal_counterexample", "terms": 6, "domain_length": 3, "step": 0.0625}],
        "lags": [1.0],
        "beta": {"kernels": [{"kind": "sines", "coefficients": [0, 1]}]},
        "noise": {"kind": "ar1", "sd": 0.1, "ar_coefficient": 0.5},
        "n": 2, "seed": seed
    }))
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulation_is_a_function_of_the_seed(seed in 0u64..1000, cov in 0u64..1000) {
        let (a, ba) = spec(seed, cov).simulate().unwrap();
        let (b, bb) = spec(seed, cov).simulate().unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(ba, bb);
        let (c, _) = spec(seed + 1, cov).simulate().unwrap();
        prop_assert_ne!(&a, &c);
    }

    #[test]
    fn fit_is_a_stationary_minimum(seed in 0u64..1000, cov in 0u64..1000, dir in 0usize..64) {
        let (design, _) = spec(seed, cov).simulate().unwrap();
        let sys = assemble(&design);
        let res = fit(&design, &FitOptions::default()).unwrap();
        let c = design.layout().pack(&res.coef).unwrap();
        let g = sys.gradient(&c);
        let scale = sys.rhs.iter().map(|v| v.abs()).fold(0.0, f64::max);
        prop_assert!(g.iter().all(|v| v.abs() <= 1e-8 * scale), "gradient {:?}", g);

        // any perturbation raises the SSE by exactly its quadratic form
        let mut e = vec![0.0; c.len()];
        e[dir % c.len()] = 1e-2;
        let moved: Vec<f64> = c.iter().zip(&e).map(|(a, b)| a + b).collect();
        let base = sse(&design, &res.coef).unwrap();
        let bumped = sse(&design, &design.layout().unpack(&moved)).unwrap();
        let q = sys.quadratic(&e);
        prop_assert!(bumped >= base);
        prop_assert!((bumped - base - q).abs() <= 1e-8 * base.max(q));
    }

    #[test]
    fn solvers_agree_on_identifiable_designs(seed in 0u64..1000, cov in 0u64..1000) {
        let (design, _) = spec(seed, cov).simulate().unwrap();
        let direct = fit(&design, &FitOptions::default()).unwrap().coef;
        let svd = fit(&design, &FitOptions { solver: Solver::TruncatedSvd, svd_rel_tol: 1e-12, ..FitOptions::default() })
            .unwrap()
            .coef;
        prop_assert!(svd.relative_l2_error(&direct).unwrap() < 1e-8);
    }

    #[test]
    fn weighted_gram_is_positive_semidefinite(seed in 0u64..1000) {
        for s in [spec(seed, seed + 7), counterexample(seed)] {
            let (design, _) = s.simulate().unwrap();
            let ev = assemble(&design).weighted_eigenvalues();
            let top = ev.iter().cloned().fold(0.0, f64::max);
            prop_assert!(ev.iter().all(|&l| l >= -1e-12 * top));
        }
    }

    #[test]
    fn null_directions_leave_the_fit_unchanged(seed in 0u64..1000, k in 0usize..4, w in -5.0f64..5.0) {
        let (design, _) = counterexample(seed).simulate().unwrap();
        let rep = gram_spectrum(&assemble(&design), 1e-10).unwrap();
        prop_assert!(!rep.is_full_rank());
        let gamma = &rep.null_basis[k % rep.null_basis.len()];
        let q = quadratic_form(&design, gamma).unwrap();
        prop_assert!(q <= 1e-10, "quadratic form {q}");

        let opts = FitOptions { allow_rank_deficient: true, ..FitOptions::default() };
        let res = fit(&design, &opts).unwrap();
        prop_assert!(res.minimum_norm);
        let shifted = res.coef.axpby(1.0, gamma, w).unwrap();
        let a = sse(&design, &res.coef).unwrap();
        let b = sse(&design, &shifted).unwrap();
        prop_assert!((a - b).abs() <= 1e-8 * a.max(1.0));
    }

    #[test]
    fn downsampled_row_counts(seed in 0u64..1000, m in 1usize..12) {
        let (design, _) = spec(seed, 3).simulate().unwrap();
        let u = m as f64 * design.step();
        let flm = to_flm(&design, u).unwrap();
        let per = ((3.0 - design.alpha_star()) / u + 1e-9).floor() as usize + 1;
        prop_assert_eq!(flm.counts(), vec![per; design.n_obs()]);
        prop_assert!(flm.rows.iter().all(|r| r.t >= design.alpha_star() - 1e-12 && r.t <= 3.0 + 1e-12));
    }
}
