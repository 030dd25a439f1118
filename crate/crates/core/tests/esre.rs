use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regimelq_core::esre::{
    direct_coupled_oracle, lattice_for, picard_step, solve_esre, solve_p0, sup_difference, Backend,
    EsreOptions, RiccatiForm,
};
use regimelq_core::lattice::{Lattice, TimeGrid};
use regimelq_core::matcore::{loewner_leq, Mat, SymMatrix};
use regimelq_core::model::{CoefficientField, ProblemSpec};
use regimelq_core::samples::{asymmetric_scalar, e1, e1_value, random_spec, symmetric_generator, RandomSpecOptions};
use regimelq_core::Error;

/// Scalar fourth-order integrator for `y' = f(t, y)` backward from `y(T)`.
fn scalar_rk4_back(f: impl Fn(f64, f64) -> f64, y_t: f64, horizon: f64, steps: usize) -> f64 {
    let h = horizon / steps as f64;
    let mut y = y_t;
    for k in (0..steps).rev() {
        let t1 = (k + 1) as f64 * h;
        let tm = t1 - 0.5 * h;
        let t0 = k as f64 * h;
        let k1 = f(t1, y);
        let k2 = f(tm, y - 0.5 * h * k1);
        let k3 = f(tm, y - 0.5 * h * k2);
        let k4 = f(t0, y - h * k3);
        y -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    y
}

fn opts(steps: usize) -> EsreOptions {
    EsreOptions {
        grid_steps: steps,
        ..EsreOptions::default()
    }
}

#[test]
fn e1_matches_closed_form() {
    let sol = solve_esre(&e1(), &opts(1000)).unwrap();
    for i in 0..2 {
        assert!((sol.initial(i).get(0, 0) - 0.5).abs() <= 1e-6);
        assert_eq!(sol.p[i][1000].get(0, 0), 1.0);
    }
    let times = sol.times();
    for (k, &t) in times.iter().enumerate().step_by(97) {
        assert!((sol.p[0][k].get(0, 0) - e1_value(t)).abs() < 1e-8);
    }
    assert_eq!(sol.backend, Backend::Ode);
    assert!(*sol.residual_history.last().unwrap() <= 1e-9);
}

#[test]
fn e1_initial_iterate_is_constant_after_untilde() {
    let spec = e1();
    let lattice = lattice_for(&spec, &opts(2000)).unwrap();
    let (p0, _) = solve_p0(&spec, &lattice, &opts(2000)).unwrap();
    for (k, t) in lattice.node_times().into_iter().enumerate() {
        for field in &p0 {
            assert!((field[k].get(0, 0) * t.exp() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn e1_first_iterate_matches_scalar_oracle() {
    let spec = e1();
    let o = opts(2000);
    let lattice = lattice_for(&spec, &o).unwrap();
    let (p0, _) = solve_p0(&spec, &lattice, &o).unwrap();
    let (p1, _) = picard_step(&spec, &p0, &lattice, &o).unwrap();
    // untilded first iterate: P' = P + P² − 1, P(1) = 1
    let expected = scalar_rk4_back(|_, p| p + p * p - 1.0, 1.0, 1.0, 100_000);
    for field in &p1 {
        let value = field[0].get(0, 0);
        assert!((value - expected).abs() <= 1e-6, "{value} vs {expected}");
        assert!((0.5..=1.0).contains(&value));
    }
}

#[test]
fn asymmetric_initial_iterate_matches_linear_oracle() {
    let spec = asymmetric_scalar();
    let o = opts(1000);
    let lattice = lattice_for(&spec, &o).unwrap();
    let (p0, _) = solve_p0(&spec, &lattice, &o).unwrap();
    // P_1' = −(1 − P_1 + P_2), P_2' = −(P_1 − P_2), both ending at 1
    let h = 1e-5;
    let steps = 100_000;
    let f = |y: [f64; 2]| [-(1.0 - y[0] + y[1]), -(y[0] - y[1])];
    let mut y = [1.0, 1.0];
    for _ in 0..steps {
        let k1 = f(y);
        let k2 = f([y[0] - 0.5 * h * k1[0], y[1] - 0.5 * h * k1[1]]);
        let k3 = f([y[0] - 0.5 * h * k2[0], y[1] - 0.5 * h * k2[1]]);
        let k4 = f([y[0] - h * k3[0], y[1] - h * k3[1]]);
        for b in 0..2 {
            y[b] -= h / 6.0 * (k1[b] + 2.0 * k2[b] + 2.0 * k3[b] + k4[b]);
        }
    }
    for i in 0..2 {
        assert!((p0[i][0].get(0, 0) - y[i]).abs() < 1e-9, "regime {i}");
    }
    assert!(p0.iter().flatten().all(|v| v.min_eigenvalue() >= -1e-10));
}

#[test]
fn iterates_are_monotone_and_psd() {
    let mut specs = vec![e1()];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..3 {
        specs.push(random_spec(&mut rng, &RandomSpecOptions::default()));
    }
    for spec in &specs {
        let o = EsreOptions {
            grid_steps: 400,
            record_iterates: true,
            ..EsreOptions::default()
        };
        let sol = solve_esre(spec, &o).unwrap();
        let its = sol.iterates.as_ref().unwrap();
        assert_eq!(its.len(), sol.iterations + 1);
        for pair in its.windows(2) {
            for (next, prev) in pair[1].iter().flatten().zip(pair[0].iter().flatten()) {
                assert!(loewner_leq(next, prev, 1e-8).unwrap());
                assert!(next.min_eigenvalue() >= -1e-9);
            }
        }
        for it in its {
            for (v, p0) in it.iter().flatten().zip(its[0].iter().flatten()) {
                assert!(loewner_leq(v, p0, 1e-8).unwrap());
            }
        }
        let hist = &sol.residual_history;
        assert!(hist.windows(2).skip(1).filter(|w| w[1] > w[0]).count() <= 1);
    }
}

#[test]
fn picard_limit_agrees_with_coupled_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for tables in [false, true] {
        let spec = random_spec(
            &mut rng,
            &RandomSpecOptions {
                time_tables: tables,
                ..RandomSpecOptions::default()
            },
        );
        let o = opts(800);
        let sol = solve_esre(&spec, &o).unwrap();
        let oracle = direct_coupled_oracle(&spec, &TimeGrid::new(spec.horizon, 800), &o).unwrap();
        let diff = sup_difference(&sol.p, &oracle.p);
        assert!(diff <= 1e-8_f64.max(10.0 * o.picard_tol), "diff {diff}");
    }
}

#[test]
fn coupled_oracle_on_e1() {
    let o = opts(1000);
    let sol = direct_coupled_oracle(&e1(), &TimeGrid::new(1.0, 1000), &o).unwrap();
    assert!((sol.initial(0).get(0, 0) - 0.5).abs() <= 1e-8);
}

#[test]
fn coupled_oracle_reports_blow_up() {
    // strongly unstable drift over a long horizon
    let spec = ProblemSpec::builder(1, 1, symmetric_generator(1.0), 10.0)
        .a(CoefficientField::uniform(2, Mat::from_element(1, 1, 5.0)))
        .q(CoefficientField::uniform(2, Mat::from_element(1, 1, 1.0)))
        .build()
        .unwrap();
    let err = direct_coupled_oracle(&spec, &TimeGrid::new(10.0, 200), &opts(200)).unwrap_err();
    assert!(matches!(err, Error::StepFailure { .. }));
}

#[test]
fn linear_in_cost_scale_without_dynamics() {
    let base = ProblemSpec::builder(2, 1, symmetric_generator(0.7), 1.0)
        .q(CoefficientField::Constant(vec![
            Mat::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
            Mat::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.1]),
        ]))
        .g(CoefficientField::uniform(2, Mat::identity(2, 2)))
        .build()
        .unwrap();
    let grid = TimeGrid::new(1.0, 200);
    let o = opts(200);
    let one = direct_coupled_oracle(&base, &grid, &o).unwrap();
    let three = direct_coupled_oracle(&base.with_scaled_cost(3.0), &grid, &o).unwrap();
    for (a, b) in one.p.iter().flatten().zip(three.p.iter().flatten()) {
        assert!((&a.scale(3.0) - b).max_abs() < 1e-12);
    }
}

#[test]
fn stationary_when_only_terminal_weight() {
    let g0 = Mat::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let spec = ProblemSpec::builder(2, 1, symmetric_generator(1.3), 0.8)
        .g(CoefficientField::uniform(2, g0.clone()))
        .build()
        .unwrap();
    let sol = solve_esre(&spec, &opts(2000)).unwrap();
    for v in sol.p.iter().flatten() {
        assert!((v.as_mat() - &g0).abs().max() < 1e-12);
    }
}

#[test]
fn d_free_form_matches_general_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = random_spec(
        &mut rng,
        &RandomSpecOptions {
            d_scale: 0.0,
            ..RandomSpecOptions::default()
        },
    );
    let general = solve_esre(&spec, &opts(300)).unwrap();
    let special = solve_esre(
        &spec,
        &EsreOptions {
            form: RiccatiForm::NoControlNoise,
            ..opts(300)
        },
    )
    .unwrap();
    assert!(sup_difference(&general.p, &special.p) <= 1e-12);
    assert_eq!(general.diagnostics.smallness, 0.0);

    let with_d = random_spec(&mut rng, &RandomSpecOptions::default());
    let bad = solve_esre(
        &with_d,
        &EsreOptions {
            form: RiccatiForm::NoControlNoise,
            ..opts(50)
        },
    );
    assert!(matches!(bad, Err(Error::StructuralError(_))) || with_d.d_is_zero());
}

#[test]
fn apriori_bound_holds_on_solved_specs() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut specs = vec![e1(), asymmetric_scalar()];
    for _ in 0..3 {
        specs.push(random_spec(&mut rng, &RandomSpecOptions::default()));
    }
    for spec in &specs {
        let d = solve_esre(spec, &opts(200)).unwrap().diagnostics;
        assert!(d.k_estimate > 0.0 && d.rho > 0.0);
        assert!(d.bound_holds(), "{d:?}");
    }
    let e1d = solve_esre(&e1(), &opts(200)).unwrap().diagnostics;
    assert_eq!(e1d.k_estimate, 1.0);
    assert_eq!(e1d.rho, 9.0);
}

#[test]
fn converged_solution_is_a_fixed_point_of_the_full_equation() {
    use regimelq_core::esre::{drift_h, drift_pi};
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let spec = random_spec(&mut rng, &RandomSpecOptions::default());
    let steps = 400;
    let sol = solve_esre(&spec, &opts(steps)).unwrap();
    let grid = TimeGrid::new(spec.horizon, steps);
    let dt = grid.dt();
    let zero = SymMatrix::zeros(spec.n);
    let mut worst = 0.0_f64;
    for k in 0..steps {
        for i in 0..spec.ell() {
            let c = spec.coeffs_at(grid.time(k), i, None).unwrap();
            let p = &sol.p[i][k + 1];
            let mut f = &(&drift_pi(&c, p, &zero).unwrap() + &c.q) + &drift_h(&c, p, &zero, 1e12).unwrap();
            for j in 0..spec.ell() {
                f = f.axpy(spec.generator.rate(i, j), &sol.p[j][k + 1]);
            }
            let stepped = p.axpy(dt, &f);
            worst = worst.max((&stepped - &sol.p[i][k]).frobenius_norm());
        }
    }
    // one explicit step reproduces the stored value to second order
    assert!(worst <= 50.0 * dt * dt, "worst {worst}");
}

#[test]
fn non_convergence_reports_history() {
    let err = solve_esre(
        &asymmetric_scalar(),
        &EsreOptions {
            picard_max_iter: 1,
            ..opts(100)
        },
    )
    .unwrap_err();
    match err {
        Error::NoConvergence {
            iterations,
            residual_history,
            ..
        } => {
            assert_eq!(iterations, 1);
            assert_eq!(residual_history.len(), 1);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn violated_assumptions_are_rejected() {
    let spec = ProblemSpec::builder(1, 1, symmetric_generator(1.0), 1.0)
        .g(CoefficientField::uniform(2, Mat::from_element(1, 1, -1.0)))
        .build()
        .unwrap();
    assert!(matches!(
        solve_esre(&spec, &opts(10)),
        Err(Error::AssumptionsViolated(_))
    ));
}

#[test]
fn tree_backend_on_e1() {
    let mut errors = Vec::new();
    for depth in [6, 8, 10] {
        let sol = solve_esre(
            &e1(),
            &EsreOptions {
                backend: Backend::Tree,
                tree_depth: depth,
                ..EsreOptions::default()
            },
        )
        .unwrap();
        assert!(sol.lambda.iter().flatten().all(|l| l.max_abs() == 0.0));
        assert!(matches!(sol.lattice, Lattice::Tree(_)));
        errors.push((sol.initial(0).get(0, 0) - 0.5).abs());
    }
    assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
}

#[test]
fn ode_backend_rejects_tree_coefficients() {
    let leaf = Mat::from_element(1, 1, 1.0);
    let values = vec![(0..=2).map(|k| vec![leaf.clone(); k + 1]).collect::<Vec<_>>(); 2];
    let spec = ProblemSpec::builder(1, 1, symmetric_generator(1.0), 1.0)
        .q(CoefficientField::TreeNode { depth: 2, values })
        .build()
        .unwrap();
    assert!(matches!(solve_esre(&spec, &opts(10)), Err(Error::StructuralError(_))));
    let tree = EsreOptions {
        backend: Backend::Tree,
        tree_depth: 3,
        ..EsreOptions::default()
    };
    assert!(matches!(solve_esre(&spec, &tree), Err(Error::StructuralError(_))));
    let ok = solve_esre(&spec, &EsreOptions { tree_depth: 2, ..tree }).unwrap();
    assert!(ok.diagnostics.bound_holds());
}
