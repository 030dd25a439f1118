use crate::config::{ConfigError, RunConfig};
use crate::io::{
    meta_path, read_solution_csv, read_toml, write_solution_csv, write_text, write_toml, DiagnosticsMeta, IoError,
    SolutionMeta, SolutionTable,
};
use nalgebra::DVector;
use regimelq_core::control::{feedback_gain, mc_cost, optimality_gap, value_at, Perturbation, Policy};
use regimelq_core::esre::{solve_esre, solve_p0, EsreSolution};
use regimelq_core::fbsde_check::{fitted_order, tree_fbsde_oracle, xinv_product_check, ypx_residual};
use regimelq_core::lattice::{BinomialTree, Lattice};
use regimelq_core::matcore::Mat;
use regimelq_core::model::{check_smallness, validate_assumptions, CoefficientField, ProblemSpec};
use regimelq_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Validate,
    Solve,
    Simulate,
    Verify,
    Report,
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "validate" => Ok(Command::Validate),
            "solve" => Ok(Command::Solve),
            "simulate" => Ok(Command::Simulate),
            "verify" => Ok(Command::Verify),
            "report" => Ok(Command::Report),
            other => Err(format!("unknown command `{other}`")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("solver failed: {0}")]
    Solver(CoreError),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("i/o error: {0}")]
    Io(#[from] IoError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(ConfigError::Io { .. }) => 4,
            CliError::Config(_) | CliError::Validation(_) => 1,
            CliError::Solver(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

fn core(e: CoreError) -> CliError {
    match e {
        CoreError::AssumptionsViolated(msg) => CliError::Validation(msg),
        other => CliError::Solver(other),
    }
}

/// Runs `cmd`, writing artifacts under `dir` and messages to `out`.
pub fn run_command(cmd: Command, cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Validate => validate(cfg, out),
        Command::Solve => solve(cfg, dir, out).map(|_| ()),
        Command::Simulate => simulate(cfg, dir, out),
        Command::Verify => verify(cfg, dir, out),
        Command::Report => report(cfg, dir, out),
    }
}

fn validate(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let report = validate_assumptions(&cfg.problem, cfg.solver.assumption_tol).map_err(core)?;
    let smallness = check_smallness(&cfg.problem, cfg.solver.cond_threshold)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let _ = writeln!(out, "{report}");
    let _ = writeln!(
        out,
        "smallness {smallness:e} (threshold {:e})",
        cfg.solver.smallness_threshold
    );
    if smallness > cfg.solver.smallness_threshold {
        let _ = writeln!(out, "warning: control noise exceeds the smallness threshold");
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{} assumption violations", report.violations.len())))
    }
}

fn base_meta(cfg: &RunConfig) -> SolutionMeta {
    let s = &cfg.solver;
    SolutionMeta {
        backend: s.options().backend.name().to_string(),
        n: cfg.problem.n,
        m: cfg.problem.m,
        regimes: cfg.problem.ell(),
        horizon: cfg.problem.horizon,
        grid_steps: s.grid_steps,
        tree_depth: s.tree_depth,
        picard_tol: s.picard_tol,
        picard_max_iter: s.picard_max_iter,
        psd_tol: s.psd_tol,
        cond_threshold: s.cond_threshold,
        smallness_threshold: s.smallness_threshold,
        assumption_tol: s.assumption_tol,
        converged: false,
        iterations: 0,
        residual_history: Vec::new(),
        failure: None,
        diagnostics: None,
    }
}

fn solve(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<EsreSolution, CliError> {
    let paths = cfg.output.rooted(dir);
    let meta = meta_path(&paths.solution_path);
    let mut record = base_meta(cfg);
    match solve_esre(&cfg.problem, &cfg.solver.options()) {
        Ok(sol) => {
            record.converged = true;
            record.iterations = sol.iterations;
            record.residual_history = sol.residual_history.clone();
            record.diagnostics = Some(DiagnosticsMeta::from(&sol.diagnostics));
            write_solution_csv(&sol, &paths.solution_path)?;
            write_toml(&meta, &record)?;
            let _ = writeln!(out, "converged after {} Picard iterations", sol.iterations);
            for i in 0..sol.ell() {
                let _ = writeln!(out, "P(0, {}) = {:?}", i + 1, sol.initial(i).as_mat().as_slice());
            }
            if sol.diagnostics.smallness_exceeded {
                let _ = writeln!(out, "warning: smallness {:e} above threshold", sol.diagnostics.smallness);
            }
            Ok(sol)
        }
        Err(CoreError::AssumptionsViolated(msg)) => Err(CliError::Validation(msg)),
        Err(e) => {
            if let CoreError::NoConvergence {
                iterations,
                residual_history,
                ..
            } = &e
            {
                record.iterations = *iterations;
                record.residual_history = residual_history.clone();
            }
            record.failure = Some(e.to_string());
            write_toml(&meta, &record)?;
            Err(CliError::Solver(e))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbedCost {
    pub label: String,
    pub mean: f64,
    pub std_error: f64,
    pub gap: f64,
    pub gap_std_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theoretical_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostsReport {
    pub x0: Vec<f64>,
    pub i0: usize,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub value: f64,
    pub feedback: Estimate,
    pub perturbations: Vec<PerturbedCost>,
}

fn simulate(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let sol = solve(cfg, dir, out)?;
    let spec = &cfg.problem;
    let sim = &cfg.simulate;
    let gain = feedback_gain(&sol, spec, cfg.solver.cond_threshold).map_err(core)?;
    let policy = Policy {
        gain: &gain,
        perturbation: &Perturbation::Zero,
    };
    let base = mc_cost(spec, policy, &sim.x0, sim.i0, sim.n_paths, sim.dt, sim.seed).map_err(core)?;
    let value = value_at(&sol, &sim.x0, sim.i0);
    let _ = writeln!(
        out,
        "value {value:.6}  feedback cost {:.6} ± {:.2e}",
        base.mean, base.std_error
    );
    let mut perturbations = Vec::new();
    for (label, p) in &sim.perturbations {
        let g = optimality_gap(spec, &sol, &gain, p, &sim.x0, sim.i0, sim.n_paths, sim.dt, sim.seed).map_err(core)?;
        let _ = writeln!(out, "{label}: gap {:.6} ± {:.2e}", g.gap, g.std_error);
        perturbations.push(PerturbedCost {
            label: label.clone(),
            mean: g.perturbed.mean,
            std_error: g.perturbed.std_error,
            gap: g.gap,
            gap_std_error: g.std_error,
            theoretical_gap: g.theoretical,
        });
    }
    let report = CostsReport {
        x0: sim.x0.iter().copied().collect(),
        i0: sim.i0 + 1,
        n_paths: sim.n_paths,
        dt: sim.dt,
        seed: sim.seed,
        value,
        feedback: Estimate {
            mean: base.mean,
            std_error: base.std_error,
        },
        perturbations,
    };
    write_toml(&cfg.output.rooted(dir).costs_path, &report)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub values: BTreeMap<String, f64>,
}

impl Check {
    fn new(name: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed: true,
            note: None,
            values: BTreeMap::new(),
        }
    }

    fn skipped(name: impl Into<String>, why: &str) -> Self {
        let mut c = Check::new(name);
        c.note = Some(format!("skipped: {why}"));
        c
    }

    fn set(&mut self, key: impl Into<String>, v: f64) {
        self.values.insert(key.into(), v);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub tolerances: crate::config::VerifyConfig,
    pub checks: Vec<Check>,
}

fn field_is_zero(f: &CoefficientField) -> bool {
    let zero = |m: &Mat| m.iter().all(|&v| v == 0.0);
    match f {
        CoefficientField::Constant(v) => v.iter().all(zero),
        CoefficientField::TimeTable(v) => v.iter().flatten().all(|(_, m)| zero(m)),
        CoefficientField::TreeNode { values, .. } => values.iter().flatten().flatten().all(zero),
    }
}

fn noisy(spec: &ProblemSpec) -> bool {
    !field_is_zero(&spec.c) || !field_is_zero(&spec.d)
}

fn default_family(m: usize) -> Vec<(String, Perturbation)> {
    let ones = DVector::from_element(m, 1.0);
    vec![
        ("constant[0.25]".into(), Perturbation::Constant(&ones * 0.25)),
        ("constant[0.5]".into(), Perturbation::Constant(&ones * 0.5)),
        ("linear[0.5]".into(), Perturbation::Linear { slope: &ones * 0.5 }),
    ]
}

fn check_ypx(cfg: &RunConfig, sol: &EsreSolution) -> Result<Vec<Check>, CliError> {
    let Lattice::Grid(grid) = sol.lattice else {
        return Ok(vec![Check::skipped("path_residual", "tree solution")]);
    };
    let v = &cfg.verify;
    if let Some(&s) = v.ypx_strides.iter().find(|&&s| s > grid.steps) {
        return Err(ConfigError::Range {
            key: "verify.ypx_strides".into(),
            message: format!("stride {s} exceeds grid_steps {}", grid.steps),
        }
        .into());
    }
    let dts: Vec<f64> = v.ypx_strides.iter().map(|&s| s as f64 * grid.dt()).collect();
    let min_order = if noisy(&cfg.problem) { v.min_order_noisy } else { v.min_order };
    let mut checks = Vec::new();
    for regime in 0..sol.ell() {
        let stats = ypx_residual(sol, &cfg.problem, regime, &dts, cfg.simulate.seed, cfg.solver.cond_threshold)
            .map_err(core)?;
        let mut c = Check::new(format!("path_residual.regime{}", regime + 1));
        let rms: Vec<f64> = stats.iter().map(|s| s.rms).collect();
        for (k, s) in stats.iter().enumerate() {
            c.set(format!("rms.{k}"), s.rms);
            c.set(format!("max.{k}"), s.max);
            c.set(format!("dt.{k}"), s.dt);
        }
        if rms.iter().all(|&r| r <= 1e-12) {
            c.note = Some("residual at rounding level".into());
        } else {
            let order = fitted_order(&dts, &rms);
            c.set("order", order);
            c.set("min_order", min_order);
            c.passed = order >= min_order;
        }
        checks.push(c);
    }
    Ok(checks)
}

fn check_oracle(cfg: &RunConfig) -> Result<Vec<Check>, CliError> {
    let spec = &cfg.problem;
    let depths = &cfg.verify.oracle_depths;
    if !spec.d_is_zero() || spec.n > 2 {
        return Ok(vec![Check::skipped("tree_oracle", "needs D = 0 and n <= 2")]);
    }
    if !spec.is_deterministic() {
        return Ok(vec![Check::skipped("tree_oracle", "coefficients tied to the solver tree")]);
    }
    if depths.is_empty() {
        return Ok(vec![Check::skipped("tree_oracle", "no depths configured")]);
    }
    let opts = cfg.solver.options();
    let mut checks = Vec::new();
    for regime in 0..spec.ell() {
        let mut c = Check::new(format!("tree_oracle.regime{}", regime + 1));
        let mut devs = Vec::new();
        for &depth in depths {
            let lattice = Lattice::Tree(BinomialTree::new(spec.horizon, depth));
            let (p0, _) = solve_p0(spec, &lattice, &opts).map_err(core)?;
            let res = tree_fbsde_oracle(spec, depth, &p0, regime, &opts).map_err(core)?;
            c.set(format!("deviation.depth{depth}"), res.deviation);
            devs.push(res.deviation);
        }
        for (w, d) in devs.windows(2).zip(depths.windows(2)) {
            if w[0] <= 1e-12 {
                continue;
            }
            let needed = cfg.verify.min_oracle_ratio.powf((d[1] as f64 / d[0] as f64).log2());
            c.passed &= w[0] >= needed * w[1];
        }
        checks.push(c);
    }
    Ok(checks)
}

fn check_xinv(cfg: &RunConfig, sol: &EsreSolution) -> Result<Vec<Check>, CliError> {
    let spec = &cfg.problem;
    if !spec.is_deterministic() {
        return Ok(vec![Check::skipped("inverse_state", "coefficients tied to the solver tree")]);
    }
    let gain = feedback_gain(sol, spec, cfg.solver.cond_threshold).map_err(core)?;
    let mut checks = Vec::new();
    for regime in 0..spec.ell() {
        let st = xinv_product_check(spec, regime, &gain, cfg.simulate.dt, cfg.simulate.seed).map_err(core)?;
        let mut c = Check::new(format!("inverse_state.regime{}", regime + 1));
        c.set("rms", st.rms);
        c.set("max", st.max);
        c.set("tol", cfg.verify.xinv_tol);
        c.passed = st.max <= cfg.verify.xinv_tol;
        checks.push(c);
    }
    Ok(checks)
}

fn check_gaps(cfg: &RunConfig, sol: &EsreSolution) -> Result<Vec<Check>, CliError> {
    let spec = &cfg.problem;
    let sim = &cfg.simulate;
    let gain = feedback_gain(sol, spec, cfg.solver.cond_threshold).map_err(core)?;
    let family = if sim.perturbations.is_empty() {
        default_family(spec.m)
    } else {
        sim.perturbations.clone()
    };
    let mut checks = Vec::new();
    for (label, p) in &family {
        let g = optimality_gap(spec, sol, &gain, p, &sim.x0, sim.i0, cfg.verify.gap_paths, sim.dt, sim.seed)
            .map_err(core)?;
        let mut c = Check::new(format!("optimality_gap.{label}"));
        c.set("gap", g.gap);
        c.set("std_error", g.std_error);
        c.passed = g.gap >= -3.0 * g.std_error;
        if let Some(th) = g.theoretical {
            c.set("theoretical", th);
            c.set("tol", cfg.verify.gap_tol);
            c.passed &= (g.gap - th).abs() <= cfg.verify.gap_tol.max(3.0 * g.std_error);
        }
        checks.push(c);
    }
    Ok(checks)
}

fn verify(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let sol = solve(cfg, dir, out)?;
    let d = &sol.diagnostics;
    let mut bound = Check::new("apriori_bound");
    bound.set("k", d.k_estimate);
    bound.set("rho", d.rho);
    bound.set("bound", d.apriori_bound);
    bound.set("measured", d.measured_sup);
    bound.passed = d.bound_holds();
    let mut checks = vec![bound];
    checks.extend(check_ypx(cfg, &sol)?);
    checks.extend(check_oracle(cfg)?);
    checks.extend(check_xinv(cfg, &sol)?);
    checks.extend(check_gaps(cfg, &sol)?);
    for c in &checks {
        let status = match (&c.note, c.passed) {
            (Some(n), true) if n.starts_with("skipped") => "SKIP",
            (_, true) => "PASS",
            (_, false) => "FAIL",
        };
        let _ = writeln!(out, "{status} {}", c.name);
    }
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
    let report = VerifyReport {
        passed: failed.is_empty(),
        tolerances: cfg.verify.clone(),
        checks,
    };
    write_toml(&cfg.output.rooted(dir).report_path, &report)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(String::new, |f| f.to_string_lossy().into_owned())
}

/// Wide table: one line per time (and node), one column per regime and entry.
fn series_csv(table: &SolutionTable) -> String {
    let (ell, n) = (table.regimes(), table.dim());
    let mut s = String::from(if table.tree { "t,node" } else { "t" });
    for r in 1..=ell {
        for i in 1..=n {
            for j in 1..=n {
                let _ = write!(s, ",P{r}_{i}{j}");
            }
        }
    }
    s.push('\n');
    for chunk in table.rows.chunks(ell * n * n) {
        let head = &chunk[0];
        let _ = write!(s, "{:.16e}", head.t);
        if let Some(node) = head.node {
            let _ = write!(s, ",{node}");
        }
        for row in chunk {
            let _ = write!(s, ",{:e}", row.p);
        }
        s.push('\n');
    }
    s
}

fn report(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let paths = cfg.output.rooted(dir);
    let table = read_solution_csv(&paths.solution_path)?;
    let meta: SolutionMeta = read_toml(&meta_path(&paths.solution_path))?;
    let mut s = String::new();
    let _ = writeln!(s, "solution {}", file_name(&paths.solution_path));
    let _ = writeln!(
        s,
        "  backend {}, n = {}, m = {}, regimes = {}, horizon {}",
        meta.backend, meta.n, meta.m, meta.regimes, meta.horizon
    );
    let _ = writeln!(
        s,
        "  converged {} after {} iterations (tol {:e})",
        meta.converged, meta.iterations, meta.picard_tol
    );
    for r in 1..=table.regimes() {
        let entries: Vec<String> = (1..=table.dim())
            .flat_map(|i| (1..=table.dim()).map(move |j| (i, j)))
            .filter_map(|(i, j)| table.initial(r, i, j))
            .map(|v| format!("{v:.10}"))
            .collect();
        let _ = writeln!(s, "  P(0, {r}) = [{}]", entries.join(", "));
    }
    if let Some(d) = &meta.diagnostics {
        let _ = writeln!(
            s,
            "  a priori bound: K {:e}, rho {:e}, bound {:e}, measured {:e}, holds {}",
            d.k_estimate, d.rho, d.apriori_bound, d.measured_sup, d.bound_holds
        );
        let _ = writeln!(
            s,
            "  smallness {:e} (threshold {:e}), Lambda L2 {:e}",
            d.smallness, meta.smallness_threshold, d.lambda_l2
        );
    }
    if paths.costs_path.exists() {
        let c: CostsReport = read_toml(&paths.costs_path)?;
        let _ = writeln!(s, "costs {}", file_name(&paths.costs_path));
        let _ = writeln!(
            s,
            "  value {:.6}, feedback {:.6} ± {:.2e} ({} paths, dt {}, seed {})",
            c.value, c.feedback.mean, c.feedback.std_error, c.n_paths, c.dt, c.seed
        );
        for p in &c.perturbations {
            let theory = p.theoretical_gap.map_or(String::new(), |t| format!(", predicted {t:.6}"));
            let _ = writeln!(s, "  {}: gap {:.6} ± {:.2e}{theory}", p.label, p.gap, p.gap_std_error);
        }
    }
    if paths.report_path.exists() {
        let v: VerifyReport = read_toml(&paths.report_path)?;
        let _ = writeln!(s, "verification {}: {}", file_name(&paths.report_path), if v.passed { "passed" } else { "FAILED" });
        for c in &v.checks {
            let status = match (&c.note, c.passed) {
                (Some(n), true) if n.starts_with("skipped") => "skip",
                (_, true) => "pass",
                (_, false) => "FAIL",
            };
            let _ = writeln!(s, "  {status} {}", c.name);
        }
    }
    write_text(&paths.summary_path, &s)?;
    write_text(&paths.series_path, &series_csv(&table))?;
    let _ = out.write_all(s.as_bytes());
    Ok(())
}
