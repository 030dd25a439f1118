//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p regimelq --test acceptance -- --nocapture`

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regimelq_core::control::{feedback_gain, mc_cost, optimality_gap, Perturbation, Policy};
use regimelq_core::esre::{
    direct_coupled_oracle, solve_esre, solve_p0, sup_difference, Diagnostics, EsreOptions, EsreSolution,
    RiccatiForm,
};
use regimelq_core::fbsde_check::{fitted_order, tree_fbsde_oracle, ypx_residual};
use regimelq_core::lattice::{BinomialTree, Lattice, TimeGrid};
use regimelq_core::matcore::{loewner_leq, Mat};
use regimelq_core::model::{check_smallness, ProblemSpec};
use regimelq_core::regime_chain::{sample_chain_path, transition_matrix, validate_generator};
use regimelq_core::samples::{e1, random_spec, symmetric_generator, RandomSpecOptions};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

type Outcome = (bool, String);

/// Every solution produced by the suite, for the a priori bound check.
#[derive(Default)]
struct Solved(Vec<(String, Diagnostics)>);

impl Solved {
    fn solve(&mut self, label: &str, spec: &ProblemSpec, opts: &EsreOptions) -> EsreSolution {
        let sol = solve_esre(spec, opts).unwrap();
        self.0.push((label.to_string(), sol.diagnostics.clone()));
        sol
    }
}

fn grid(steps: usize) -> EsreOptions {
    EsreOptions {
        grid_steps: steps,
        ..EsreOptions::default()
    }
}

fn closed_form(solved: &mut Solved) -> Outcome {
    let start = Instant::now();
    let sol = solved.solve("E1", &e1(), &grid(2000));
    let secs = start.elapsed().as_secs_f64();
    let err = (0..2).map(|i| (sol.initial(i).get(0, 0) - 0.5).abs()).fold(0.0, f64::max);
    (err <= 1e-6 && secs < 5.0, format!("max |P(0,i) - 0.5| = {err:.3e}, {secs:.2} s"))
}

fn random_family(seed: u64, count: usize, tables: bool) -> Vec<ProblemSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            random_spec(
                &mut rng,
                &RandomSpecOptions {
                    time_tables: tables && k % 2 == 1,
                    ..RandomSpecOptions::default()
                },
            )
        })
        .collect()
}

fn monotone_picard(solved: &mut Solved) -> Outcome {
    let mut specs = vec![("E1".to_string(), e1())];
    for (k, s) in random_family(2, 3, false).into_iter().enumerate() {
        specs.push((format!("random #{k} (n={}, regimes={})", s.n, s.ell()), s));
    }
    let opts = EsreOptions {
        record_iterates: true,
        ..EsreOptions::default()
    };
    let mut worst_eig = f64::INFINITY;
    let mut pairs = 0;
    for (label, spec) in &specs {
        let sol = solved.solve(label, spec, &opts);
        let its = sol.iterates.as_ref().unwrap();
        for it in its {
            for m in it.iter().flatten() {
                worst_eig = worst_eig.min(m.min_eigenvalue());
            }
        }
        for w in its.windows(2) {
            for (next, prev) in w[1].iter().flatten().zip(w[0].iter().flatten()) {
                if !loewner_leq(next, prev, 1e-8).unwrap() {
                    return (false, format!("{label}: order violated"));
                }
            }
            pairs += 1;
        }
    }
    (
        worst_eig >= -1e-9,
        format!("{} specs, {pairs} iterate pairs ordered, min eigenvalue {worst_eig:.3e}", specs.len()),
    )
}

fn cross_oracle(solved: &mut Solved) -> Outcome {
    let start = Instant::now();
    let steps = 1000;
    let mut worst = 0.0_f64;
    let specs = random_family(3, 6, true);
    for (k, spec) in specs.iter().enumerate() {
        let opts = grid(steps);
        let sol = solved.solve(&format!("cross-oracle #{k}"), spec, &opts);
        let oracle = direct_coupled_oracle(spec, &TimeGrid::new(spec.horizon, steps), &opts).unwrap();
        worst = worst.max(sup_difference(&sol.p, &oracle.p));
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst <= 1e-7 && secs < 30.0,
        format!("{} specs, sup difference {worst:.3e}, {secs:.2} s", specs.len()),
    )
}

fn tree_consistency(solved: &mut Solved) -> Outcome {
    let depths = [6usize, 8, 10];
    let mut errs = Vec::new();
    let mut lambda_zero = true;
    for &d in &depths {
        let opts = EsreOptions {
            backend: regimelq_core::esre::Backend::Tree,
            tree_depth: d,
            ..EsreOptions::default()
        };
        let sol = solved.solve(&format!("E1 tree depth {d}"), &e1(), &opts);
        errs.push((0..2).map(|i| (sol.initial(i).get(0, 0) - 0.5).abs()).fold(0.0, f64::max));
        lambda_zero &= sol.lambda.iter().flatten().all(|l| l.as_mat().iter().all(|&v| v == 0.0));
    }
    let dts: Vec<f64> = depths.iter().map(|&d| 1.0 / d as f64).collect();
    let order = fitted_order(&dts, &errs);
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    (
        decreasing && order >= 0.8 && lambda_zero,
        format!("errors {errs:?}, order {order:.3}, Lambda == 0: {lambda_zero}"),
    )
}

fn fbsde_relation(solved: &mut Solved) -> Outcome {
    let spec = e1();
    let mut devs = Vec::new();
    for depth in [8usize, 16] {
        let opts = EsreOptions {
            tree_depth: depth,
            ..EsreOptions::default()
        };
        let lattice = Lattice::Tree(BinomialTree::new(spec.horizon, depth));
        let (p0, _) = solve_p0(&spec, &lattice, &opts).unwrap();
        devs.push(tree_fbsde_oracle(&spec, depth, &p0, 0, &opts).unwrap().deviation);
    }
    let ratio = devs[0] / devs[1];
    let sol = solved.solve("E1 for path residual", &spec, &grid(2000));
    let dts = [0.01, 0.005, 0.0025];
    let rms: Vec<f64> = ypx_residual(&sol, &spec, 0, &dts, 1, 1e12)
        .unwrap()
        .iter()
        .map(|s| s.rms)
        .collect();
    let order = fitted_order(&dts, &rms);
    (
        ratio >= 1.5 && order >= 0.9,
        format!("oracle deviation {devs:?} (ratio {ratio:.2}), residual order {order:.3}"),
    )
}

fn optimality(solved: &mut Solved) -> Outcome {
    let start = Instant::now();
    let spec = e1();
    let sol = solved.solve("E1 for optimality", &spec, &grid(2000));
    let gain = feedback_gain(&sol, &spec, 1e12).unwrap();
    let x0 = DVector::from_element(1, 1.0);
    let (n, dt, seed) = (100_000, 1e-3, 2024);
    let policy = Policy {
        gain: &gain,
        perturbation: &Perturbation::Zero,
    };
    let cost = mc_cost(&spec, policy, &x0, 0, n, dt, seed).unwrap();
    let cost_ok = (cost.mean - 0.5).abs() <= (3.0 * cost.std_error).max(0.01);
    let pert = Perturbation::Constant(DVector::from_element(1, 0.5));
    let gap = optimality_gap(&spec, &sol, &gain, &pert, &x0, 0, n, dt, seed).unwrap();
    let gap_ok = (gap.gap - 0.25).abs() <= (3.0 * gap.std_error).max(0.02);
    let secs = start.elapsed().as_secs_f64();
    (
        cost_ok && gap_ok && secs < 60.0,
        format!(
            "cost {:.5} ± {:.1e}, gap {:.5} ± {:.1e} (prediction {:.5}), {secs:.1} s",
            cost.mean,
            cost.std_error,
            gap.gap,
            gap.std_error,
            gap.theoretical.unwrap_or(f64::NAN)
        ),
    )
}

fn apriori_bound(solved: &mut Solved) -> Outcome {
    let failed: Vec<&str> = solved
        .0
        .iter()
        .filter(|(_, d)| !d.bound_holds())
        .map(|(l, _)| l.as_str())
        .collect();
    let worst = solved
        .0
        .iter()
        .map(|(_, d)| d.measured_sup / d.apriori_bound)
        .fold(0.0, f64::max);
    (
        failed.is_empty() && !solved.0.is_empty(),
        format!(
            "{} solutions, largest measured/bound {worst:.3e}, failures {failed:?}",
            solved.0.len()
        ),
    )
}

fn control_noise_free(solved: &mut Solved) -> Outcome {
    let mut specs = vec![e1()];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..3 {
        specs.push(random_spec(
            &mut rng,
            &RandomSpecOptions {
                d_scale: 0.0,
                ..RandomSpecOptions::default()
            },
        ));
    }
    let mut worst = 0.0_f64;
    let mut smallness = 0.0_f64;
    for (k, spec) in specs.iter().enumerate() {
        let general = solved.solve(&format!("D = 0 #{k}"), spec, &grid(500));
        let reduced = solve_esre(
            spec,
            &EsreOptions {
                form: RiccatiForm::NoControlNoise,
                ..grid(500)
            },
        )
        .unwrap();
        worst = worst.max(sup_difference(&general.p, &reduced.p));
        smallness = smallness.max(check_smallness(spec, 1e12).unwrap().abs());
    }
    (
        worst <= 1e-12 && smallness == 0.0,
        format!("{} specs, sup difference {worst:.3e}, smallness {smallness}", specs.len()),
    )
}

fn chain_fidelity() -> Outcome {
    let g = symmetric_generator(1.0);
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let switched = (0..n)
        .filter(|_| sample_chain_path(&g, 0, 1.0, &mut rng).unwrap().state_at(1.0) != 0)
        .count();
    let p = (1.0 - (-2.0f64).exp()) / 2.0;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    let freq = switched as f64 / n as f64;
    let q = validate_generator(&Mat::from_row_slice(
        3,
        3,
        &[-1.0, 0.6, 0.4, 0.3, -0.5, 0.2, 0.5, 0.5, -1.0],
    ))
    .unwrap();
    let (s, t) = (0.37, 1.21);
    let semigroup = (transition_matrix(&q, s + t).unwrap()
        - transition_matrix(&q, s).unwrap() * transition_matrix(&q, t).unwrap())
    .amax();
    (
        (freq - p).abs() <= 4.0 * se && semigroup <= 1e-9,
        format!(
            "switch frequency {freq:.5} vs {p:.5} ({:.2} SE), semigroup defect {semigroup:.1e}",
            (freq - p).abs() / se
        ),
    )
}

fn end_to_end(dir: &Path, threads: &str) -> Vec<(String, Vec<u8>)> {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/two_state.toml");
    for cmd in ["solve", "simulate", "verify", "report"] {
        let out = Command::new(env!("CARGO_BIN_EXE_regimelq"))
            .arg(cmd)
            .arg("--config")
            .arg(&config)
            .arg("--output")
            .arg(dir)
            .args(["--seed", "17"])
            .env("REGIMELQ_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = end_to_end(a.path(), "1");
    let second = end_to_end(b.path(), "0");
    let names: Vec<&str> = first.iter().map(|f| f.0.as_str()).collect();
    (
        first == second && names.len() == 6,
        format!("{} files compared: {}", names.len(), names.join(", ")),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    })
}

#[test]
fn acceptance_criteria() {
    let mut solved = Solved::default();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "closed-form value", guarded(|| closed_form(&mut solved))));
    results.push((2, "monotone Picard iterates", guarded(|| monotone_picard(&mut solved))));
    results.push((3, "cross-oracle agreement", guarded(|| cross_oracle(&mut solved))));
    results.push((4, "tree backend consistency", guarded(|| tree_consistency(&mut solved))));
    results.push((5, "forward-backward relation", guarded(|| fbsde_relation(&mut solved))));
    results.push((6, "optimality of the feedback", guarded(|| optimality(&mut solved))));
    results.push((8, "control-noise-free specialization", guarded(|| control_noise_free(&mut solved))));
    results.push((7, "a priori bound", guarded(|| apriori_bound(&mut solved))));
    results.push((9, "regime chain fidelity", guarded(chain_fidelity)));
    results.push((10, "end-to-end determinism", guarded(determinism)));
    results.sort_by_key(|r| r.0);
    for (k, name, (ok, detail)) in &results {
        println!("{} [{k:>2}] {name}: {detail}", if *ok { "PASS" } else { "FAIL" });
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.2 .0).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
