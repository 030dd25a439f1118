use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regimelq_core::esre::{solve_esre, EsreOptions};
use regimelq_core::matcore::{loewner_leq, Mat};
use regimelq_core::model::{check_smallness, validate_assumptions};
use regimelq_core::regime_chain::{sample_chain_path, transition_matrix, validate_generator};
use regimelq_core::samples::{random_spec, RandomSpecOptions};

fn arb_generator() -> impl Strategy<Value = Mat> {
    (2usize..5).prop_flat_map(|ell| {
        proptest::collection::vec(0.0..2.0f64, ell * ell).prop_map(move |v| {
            let mut q = Mat::from_vec(ell, ell, v);
            for i in 0..ell {
                q[(i, i)] = 0.0;
                let row: f64 = q.row(i).sum();
                q[(i, i)] = -row;
            }
            q
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn semigroup_property(q in arb_generator(), s in 0.0..2.0f64, t in 0.0..2.0f64) {
        let g = validate_generator(&q).unwrap();
        let lhs = transition_matrix(&g, s + t).unwrap();
        let rhs = transition_matrix(&g, s).unwrap() * transition_matrix(&g, t).unwrap();
        prop_assert!((lhs - rhs).amax() <= 1e-9);
    }

    #[test]
    fn transition_rows_are_distributions(q in arb_generator(), t in 0.0..5.0f64) {
        let p = transition_matrix(&validate_generator(&q).unwrap(), t).unwrap();
        for i in 0..p.nrows() {
            prop_assert!((p.row(i).sum() - 1.0).abs() <= 1e-10);
            prop_assert!(p.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn sampled_paths_are_well_formed(q in arb_generator(), seed in any::<u64>(), horizon in 0.1..3.0f64) {
        let g = validate_generator(&q).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i0 in 0..g.ell() {
            let path = sample_chain_path(&g, i0, horizon, &mut rng).unwrap();
            prop_assert!(path.is_well_formed());
            prop_assert_eq!(path.state_at(0.0), i0);
        }
    }

    #[test]
    fn validation_is_monotone_in_tolerance(seed in any::<u64>(), tol in 0.0..1e-6f64, extra in 0.0..1.0f64) {
        let spec = random_spec(&mut ChaCha8Rng::seed_from_u64(seed), &RandomSpecOptions::default());
        if validate_assumptions(&spec, tol).unwrap().passed {
            prop_assert!(validate_assumptions(&spec, tol + extra).unwrap().passed);
        }
    }

    #[test]
    fn smallness_ignores_control_rescaling(seed in any::<u64>(), c in 0.1..10.0f64) {
        let spec = random_spec(&mut ChaCha8Rng::seed_from_u64(seed), &RandomSpecOptions::default());
        let a = check_smallness(&spec, 1e12).unwrap();
        let b = check_smallness(&spec.with_control_rescaled(c), 1e12).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn picard_iterates_decrease_and_stay_psd(seed in any::<u64>()) {
        let spec = random_spec(&mut ChaCha8Rng::seed_from_u64(seed), &RandomSpecOptions::default());
        let opts = EsreOptions { grid_steps: 200, record_iterates: true, ..EsreOptions::default() };
        let sol = solve_esre(&spec, &opts).unwrap();
        let its = sol.iterates.as_ref().unwrap();
        let zero = regimelq_core::matcore::SymMatrix::zeros(spec.n);
        for pair in its.windows(2) {
            for (next, prev) in pair[1].iter().flatten().zip(pair[0].iter().flatten()) {
                prop_assert!(loewner_leq(next, prev, 1e-8).unwrap());
                prop_assert!(loewner_leq(&zero, next, 1e-9).unwrap());
            }
        }
        for (k, first) in its.iter().skip(1).flatten().flatten().zip(its[0].iter().flatten().cycle()) {
            prop_assert!(loewner_leq(k, first, 1e-8).unwrap());
        }
        prop_assert!(sol.diagnostics.bound_holds());
    }
}
