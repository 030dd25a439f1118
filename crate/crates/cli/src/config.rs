//! Run configuration: TOML input, defaults and range checks.
//!
//! Matrices are row-major nested lists. A coefficient is one of
//! - a single matrix, used in every regime: `b = [[1.0]]`
//! - one matrix per regime: `q = [[[1.0]], [[0.0]]]`
//! - per-regime time tables with quoted time keys:
//!   `q = { table = [{ "0.0" = [[1.0]], "0.5" = [[2.0]] }, { "0.0" = [[1.0]] }] }`
//! - a function of the tree's Brownian value, same in every regime:
//!   `q = { base = [[1.0]], scale = [[0.5]], function = "tanh" }`
//! - explicit tree values `q = { nodes = [regime][level][up] matrices }`.
//!
//! Regimes are numbered from 1 in configuration files and outputs.

use nalgebra::DVector;
use regimelq_core::control::Perturbation;
use regimelq_core::esre::{Backend, EsreOptions};
use regimelq_core::lattice::{BinomialTree, TreeNode};
use regimelq_core::matcore::Mat;
use regimelq_core::model::{CoefficientField, ProblemSpec};
use regimelq_core::regime_chain::validate_generator;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown key `{key}` at line {line}")]
    UnknownKey { key: String, line: usize },
    #[error("{key}: {message}")]
    Range { key: String, message: String },
}

fn range(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Range {
        key: key.to_string(),
        message: message.into(),
    }
}

type Rows = Vec<Vec<f64>>;

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(untagged)]
pub enum CoefficientInput {
    Uniform(Rows),
    PerRegime(Vec<Rows>),
    Table(TableInput),
    Brownian(BrownianInput),
    Nodes(NodesInput),
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TableInput {
    pub table: Vec<BTreeMap<String, Rows>>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum BrownianFunction {
    Tanh,
    Linear,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BrownianInput {
    pub base: Rows,
    pub scale: Rows,
    pub function: BrownianFunction,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NodesInput {
    pub nodes: Vec<Vec<Vec<Rows>>>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProblemInput {
    pub n: usize,
    pub m: usize,
    pub horizon: f64,
    pub generator: Rows,
    pub delta: Option<f64>,
    pub asym_tol: Option<f64>,
    pub a: Option<CoefficientInput>,
    pub b: Option<CoefficientInput>,
    pub c: Option<CoefficientInput>,
    pub d: Option<CoefficientInput>,
    pub q: Option<CoefficientInput>,
    pub s: Option<CoefficientInput>,
    pub r: Option<CoefficientInput>,
    pub g: Option<CoefficientInput>,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum BackendName {
    Ode,
    Tree,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub backend: BackendName,
    pub grid_steps: usize,
    pub tree_depth: usize,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub psd_tol: f64,
    pub cond_threshold: f64,
    pub smallness_threshold: f64,
    pub assumption_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = EsreOptions::default();
        SolverConfig {
            backend: BackendName::Ode,
            grid_steps: d.grid_steps,
            tree_depth: d.tree_depth,
            picard_tol: d.picard_tol,
            picard_max_iter: d.picard_max_iter,
            psd_tol: d.psd_tol,
            cond_threshold: d.cond_threshold,
            smallness_threshold: d.smallness_threshold,
            assumption_tol: d.assumption_tol,
        }
    }
}

impl SolverConfig {
    pub fn options(&self) -> EsreOptions {
        EsreOptions {
            backend: match self.backend {
                BackendName::Ode => Backend::Ode,
                BackendName::Tree => Backend::Tree,
            },
            grid_steps: self.grid_steps,
            tree_depth: self.tree_depth,
            picard_tol: self.picard_tol,
            picard_max_iter: self.picard_max_iter,
            psd_tol: self.psd_tol,
            cond_threshold: self.cond_threshold,
            smallness_threshold: self.smallness_threshold,
            assumption_tol: self.assumption_tol,
            ..EsreOptions::default()
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PerturbationInput {
    pub constant: Option<Vec<f64>>,
    pub linear: Option<Vec<f64>>,
    pub table: Option<BTreeMap<String, Vec<f64>>>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateInput {
    pub x0: Option<Vec<f64>>,
    pub i0: usize,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub perturbations: Vec<PerturbationInput>,
}

impl Default for SimulateInput {
    fn default() -> Self {
        SimulateInput {
            x0: None,
            i0: 1,
            n_paths: 10_000,
            dt: 1e-3,
            seed: 0,
            perturbations: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Path-residual steps as multiples of the solver step.
    pub ypx_strides: Vec<usize>,
    pub min_order: f64,
    /// Required order when the state or control noise is nonzero.
    pub min_order_noisy: f64,
    pub oracle_depths: Vec<usize>,
    pub min_oracle_ratio: f64,
    pub xinv_tol: f64,
    pub gap_paths: usize,
    pub gap_tol: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            ypx_strides: vec![20, 10, 5],
            min_order: 0.9,
            min_order_noisy: 0.4,
            oracle_depths: vec![4, 8],
            min_oracle_ratio: 1.5,
            xinv_tol: 0.05,
            gap_paths: 10_000,
            gap_tol: 0.02,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub solution_path: PathBuf,
    pub report_path: PathBuf,
    pub costs_path: PathBuf,
    pub summary_path: PathBuf,
    pub series_path: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            solution_path: "solution.csv".into(),
            report_path: "report.toml".into(),
            costs_path: "costs.toml".into(),
            summary_path: "summary.txt".into(),
            series_path: "series.csv".into(),
        }
    }
}

impl OutputConfig {
    /// Resolves relative paths against `dir`.
    pub fn rooted(&self, dir: &Path) -> OutputConfig {
        let join = |p: &PathBuf| if p.is_absolute() { p.clone() } else { dir.join(p) };
        OutputConfig {
            solution_path: join(&self.solution_path),
            report_path: join(&self.report_path),
            costs_path: join(&self.costs_path),
            summary_path: join(&self.summary_path),
            series_path: join(&self.series_path),
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    problem: ProblemInput,
    #[serde(default)]
    solver: SolverConfig,
    #[serde(default)]
    simulate: SimulateInput,
    #[serde(default)]
    verify: VerifyConfig,
    #[serde(default)]
    output: OutputConfig,
}

/// Simulation settings with regimes converted to 0-based indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub x0: DVector<f64>,
    pub i0: usize,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub perturbations: Vec<(String, Perturbation)>,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub solver: SolverConfig,
    pub simulate: Simulation,
    pub verify: VerifyConfig,
    pub output: OutputConfig,
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text)
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, column)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        let message = e.message().to_string();
        match message.strip_prefix("unknown field `") {
            Some(rest) => ConfigError::UnknownKey {
                key: rest.split('`').next().unwrap_or_default().to_string(),
                line,
            },
            None => ConfigError::Parse { line, column, message },
        }
    })?;
    resolve(raw)
}

fn matrix(key: &str, rows: &Rows, shape: (usize, usize)) -> Result<Mat, ConfigError> {
    let (r, c) = shape;
    if rows.len() != r || rows.iter().any(|row| row.len() != c) {
        return Err(range(key, format!("expected a {r}x{c} matrix")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(range(key, "entries must be finite"));
    }
    Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
}

fn time_key(key: &str, s: &str, horizon: f64) -> Result<f64, ConfigError> {
    let t: f64 = s
        .trim()
        .parse()
        .map_err(|_| range(key, format!("time key `{s}` is not a number")))?;
    if !(0.0..=horizon).contains(&t) {
        return Err(range(key, format!("time {t} outside [0, {horizon}]")));
    }
    Ok(t)
}

fn sorted_times<V: Clone>(key: &str, map: &BTreeMap<String, V>, horizon: f64) -> Result<Vec<(f64, V)>, ConfigError> {
    let mut out: Vec<(f64, V)> = map
        .iter()
        .map(|(k, v)| Ok((time_key(key, k, horizon)?, v.clone())))
        .collect::<Result<_, ConfigError>>()?;
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    if out.first().map(|p| p.0) != Some(0.0) {
        return Err(range(key, "a table needs an entry at time 0"));
    }
    if out.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(range(key, "duplicate table times"));
    }
    Ok(out)
}

struct Shapes {
    ell: usize,
    horizon: f64,
    tree_depth: usize,
    tree_backend: bool,
}

fn coefficient(
    key: &str,
    input: &CoefficientInput,
    shape: (usize, usize),
    sh: &Shapes,
) -> Result<CoefficientField, ConfigError> {
    let per_regime = |n: usize| {
        if n == sh.ell {
            Ok(())
        } else {
            Err(range(key, format!("expected {} regimes, got {n}", sh.ell)))
        }
    };
    let tree_only = || {
        if sh.tree_backend {
            Ok(())
        } else {
            Err(range(key, "tree-valued coefficients need backend = \"tree\""))
        }
    };
    Ok(match input {
        CoefficientInput::Uniform(rows) => CoefficientField::uniform(sh.ell, matrix(key, rows, shape)?),
        CoefficientInput::PerRegime(list) => {
            per_regime(list.len())?;
            CoefficientField::Constant(list.iter().map(|r| matrix(key, r, shape)).collect::<Result<_, _>>()?)
        }
        CoefficientInput::Table(t) => {
            per_regime(t.table.len())?;
            CoefficientField::TimeTable(
                t.table
                    .iter()
                    .map(|map| {
                        sorted_times(key, map, sh.horizon)?
                            .into_iter()
                            .map(|(t, rows)| Ok((t, matrix(key, &rows, shape)?)))
                            .collect()
                    })
                    .collect::<Result<_, ConfigError>>()?,
            )
        }
        CoefficientInput::Brownian(b) => {
            tree_only()?;
            let base = matrix(key, &b.base, shape)?;
            let scale = matrix(key, &b.scale, shape)?;
            let tree = BinomialTree::new(sh.horizon, sh.tree_depth);
            let levels: Vec<Vec<Mat>> = (0..=sh.tree_depth)
                .map(|level| {
                    (0..=level)
                        .map(|up| {
                            let w = tree.w(TreeNode { level, up });
                            let f = match b.function {
                                BrownianFunction::Tanh => w.tanh(),
                                BrownianFunction::Linear => w,
                            };
                            &base + &scale * f
                        })
                        .collect()
                })
                .collect();
            CoefficientField::TreeNode {
                depth: sh.tree_depth,
                values: vec![levels; sh.ell],
            }
        }
        CoefficientInput::Nodes(nd) => {
            tree_only()?;
            per_regime(nd.nodes.len())?;
            let values = nd
                .nodes
                .iter()
                .map(|levels| {
                    if levels.len() != sh.tree_depth + 1 {
                        return Err(range(key, format!("expected {} tree levels", sh.tree_depth + 1)));
                    }
                    levels
                        .iter()
                        .enumerate()
                        .map(|(level, ups)| {
                            if ups.len() != level + 1 {
                                return Err(range(key, format!("level {level} needs {} nodes", level + 1)));
                            }
                            ups.iter().map(|r| matrix(key, r, shape)).collect()
                        })
                        .collect()
                })
                .collect::<Result<_, _>>()?;
            CoefficientField::TreeNode {
                depth: sh.tree_depth,
                values,
            }
        }
    })
}

fn build_problem(p: &ProblemInput, solver: &SolverConfig) -> Result<ProblemSpec, ConfigError> {
    if p.n == 0 {
        return Err(range("problem.n", "must be at least 1"));
    }
    if p.m == 0 {
        return Err(range("problem.m", "must be at least 1"));
    }
    if !(p.horizon > 0.0 && p.horizon.is_finite()) {
        return Err(range("problem.horizon", "must be positive and finite"));
    }
    let ell = p.generator.len();
    if ell < 2 {
        return Err(range("problem.generator", format!("need at least 2 regimes, got {ell}")));
    }
    let q = matrix("problem.generator", &p.generator, (ell, ell))?;
    let generator = validate_generator(&q).map_err(|e| range("problem.generator", e.to_string()))?;
    let sh = Shapes {
        ell,
        horizon: p.horizon,
        tree_depth: solver.tree_depth,
        tree_backend: solver.backend == BackendName::Tree,
    };
    let (n, m) = (p.n, p.m);
    let mut builder = ProblemSpec::builder(n, m, generator, p.horizon);
    let fields: [(&str, &Option<CoefficientInput>, (usize, usize)); 8] = [
        ("problem.a", &p.a, (n, n)),
        ("problem.b", &p.b, (n, m)),
        ("problem.c", &p.c, (n, n)),
        ("problem.d", &p.d, (n, m)),
        ("problem.q", &p.q, (n, n)),
        ("problem.s", &p.s, (m, n)),
        ("problem.r", &p.r, (m, m)),
        ("problem.g", &p.g, (n, n)),
    ];
    for (key, input, shape) in fields {
        let Some(input) = input else { continue };
        let field = coefficient(key, input, shape, &sh)?;
        builder = match &key[8..] {
            "a" => builder.a(field),
            "b" => builder.b(field),
            "c" => builder.c(field),
            "d" => builder.d(field),
            "q" => builder.q(field),
            "s" => builder.s(field),
            "r" => builder.r(field),
            _ => builder.g(field),
        };
    }
    if let Some(delta) = p.delta {
        if !(delta > 0.0) {
            return Err(range("problem.delta", "must be positive"));
        }
        builder = builder.delta(delta);
    }
    if let Some(tol) = p.asym_tol {
        if !(tol >= 0.0) {
            return Err(range("problem.asym_tol", "must be nonnegative"));
        }
        builder = builder.asym_tol(tol);
    }
    builder.build().map_err(|e| range("problem", e.to_string()))
}

fn check_solver(s: &SolverConfig) -> Result<(), ConfigError> {
    let positive = |key: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(range(key, "must be positive and finite"))
        }
    };
    if s.grid_steps == 0 {
        return Err(range("solver.grid_steps", "must be at least 1"));
    }
    if s.tree_depth == 0 || s.tree_depth > 4096 {
        return Err(range("solver.tree_depth", "must be in 1..=4096"));
    }
    if s.picard_max_iter == 0 {
        return Err(range("solver.picard_max_iter", "must be at least 1"));
    }
    positive("solver.picard_tol", s.picard_tol)?;
    positive("solver.psd_tol", s.psd_tol)?;
    positive("solver.smallness_threshold", s.smallness_threshold)?;
    if !(s.cond_threshold >= 1.0) {
        return Err(range("solver.cond_threshold", "must be at least 1"));
    }
    if !(s.assumption_tol >= 0.0) {
        return Err(range("solver.assumption_tol", "must be nonnegative"));
    }
    Ok(())
}

fn vector(key: &str, v: &[f64], len: usize) -> Result<DVector<f64>, ConfigError> {
    if v.len() != len || v.iter().any(|x| !x.is_finite()) {
        return Err(range(key, format!("expected {len} finite entries")));
    }
    Ok(DVector::from_column_slice(v))
}

/// Label used in reports, e.g. `constant[0.5]`.
fn label(kind: &str, v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("{kind}[{}]", parts.join(","))
}

fn perturbation(p: &PerturbationInput, m: usize, horizon: f64) -> Result<(String, Perturbation), ConfigError> {
    let key = "simulate.perturbations";
    match (&p.constant, &p.linear, &p.table) {
        (Some(v), None, None) => Ok((label("constant", v), Perturbation::Constant(vector(key, v, m)?))),
        (None, Some(v), None) => Ok((
            label("linear", v),
            Perturbation::Linear {
                slope: vector(key, v, m)?,
            },
        )),
        (None, None, Some(t)) => {
            let entries = sorted_times(key, t, horizon)?
                .into_iter()
                .map(|(t, v)| Ok((t, vector(key, &v, m)?)))
                .collect::<Result<Vec<_>, ConfigError>>()?;
            let name = entries
                .iter()
                .map(|(t, v)| format!("{t}:{}", label("", v.as_slice())))
                .collect::<Vec<_>>()
                .join(";");
            Ok((format!("table{{{name}}}"), Perturbation::Table(entries)))
        }
        _ => Err(range(key, "each entry needs exactly one of constant, linear, table")),
    }
}

fn check_simulation(s: &SimulateInput, spec: &ProblemSpec) -> Result<Simulation, ConfigError> {
    let x0 = match &s.x0 {
        Some(v) => vector("simulate.x0", v, spec.n)?,
        None => DVector::from_element(spec.n, 1.0),
    };
    if s.i0 == 0 || s.i0 > spec.ell() {
        return Err(range("simulate.i0", format!("must be in 1..={}", spec.ell())));
    }
    if s.n_paths < 2 {
        return Err(range("simulate.n_paths", "must be at least 2"));
    }
    let steps = spec.horizon / s.dt;
    if !(s.dt > 0.0) || (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
        return Err(range("simulate.dt", "must be positive and divide the horizon"));
    }
    let perturbations = s
        .perturbations
        .iter()
        .map(|p| perturbation(p, spec.m, spec.horizon))
        .collect::<Result<_, _>>()?;
    Ok(Simulation {
        x0,
        i0: s.i0 - 1,
        n_paths: s.n_paths,
        dt: s.dt,
        seed: s.seed,
        perturbations,
    })
}

fn check_verify(v: &VerifyConfig) -> Result<(), ConfigError> {
    if v.ypx_strides.len() < 2 || v.ypx_strides.contains(&0) {
        return Err(range("verify.ypx_strides", "need at least two positive strides"));
    }
    if v.oracle_depths.contains(&0) || v.oracle_depths.iter().any(|&d| d > 16) {
        return Err(range("verify.oracle_depths", "depths must be in 1..=16"));
    }
    if v.gap_paths < 2 {
        return Err(range("verify.gap_paths", "must be at least 2"));
    }
    for (key, val) in [
        ("verify.min_order", v.min_order),
        ("verify.min_order_noisy", v.min_order_noisy),
        ("verify.min_oracle_ratio", v.min_oracle_ratio),
        ("verify.xinv_tol", v.xinv_tol),
        ("verify.gap_tol", v.gap_tol),
    ] {
        if !(val >= 0.0 && val.is_finite()) {
            return Err(range(key, "must be nonnegative and finite"));
        }
    }
    Ok(())
}

fn resolve(raw: RawConfig) -> Result<RunConfig, ConfigError> {
    check_solver(&raw.solver)?;
    let problem = build_problem(&raw.problem, &raw.solver)?;
    let simulate = check_simulation(&raw.simulate, &problem)?;
    check_verify(&raw.verify)?;
    Ok(RunConfig {
        problem,
        solver: raw.solver,
        simulate,
        verify: raw.verify,
        output: raw.output,
    })
}
