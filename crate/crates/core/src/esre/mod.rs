//! Extended stochastic Riccati equation
//!
//! `dP(i) = −[Π(P(i),Λ(i)) + Q(i) + Σ_j q_ij P(j) + H(P(i),Λ(i))] dt + Λ(i) dW`,
//! `P(T,i) = G(i)`, solved through the tilde change of variables by a
//! monotone Picard scheme that freezes the cross-regime term.

mod ode;
mod oracle;
pub mod riccati;
mod tree;

pub use oracle::direct_coupled_oracle;
pub use riccati::{
    control_hessian, drift_h, drift_h_no_control_noise, drift_pi, f_of_theta, g_of_theta,
    gain_numerator, theta_hat,
};

use crate::error::{Error, Result};
use crate::lattice::{BinomialTree, Lattice, TimeGrid};
use crate::matcore::{SymMatrix, DEFAULT_COND_THRESHOLD};
use crate::model::{check_smallness, tilde_field, untilde_solution, validate_assumptions, NodeCoeffs, ProblemSpec};
use crate::regime_chain::Generator;

/// `[regime][node]`, in tilde coordinates unless stated otherwise.
pub type TildeField = Vec<Vec<SymMatrix>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    Ode,
    Tree,
}

impl Backend {
    pub fn name(self) -> &'static str {
        match self {
            Backend::Ode => "ode",
            Backend::Tree => "tree",
        }
    }
}

/// How the nonlinear term is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RiccatiForm {
    General,
    /// `−(PB + Sᵀ)R⁻¹(BᵀP + S)`; only valid when `D ≡ 0`.
    NoControlNoise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EsreOptions {
    pub backend: Backend,
    pub grid_steps: usize,
    pub tree_depth: usize,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub psd_tol: f64,
    pub cond_threshold: f64,
    pub smallness_threshold: f64,
    /// Tolerance for the positivity assumptions checked before solving.
    pub assumption_tol: f64,
    pub form: RiccatiForm,
    /// Keep every tilde iterate `P̃_0, P̃_1, …` in the solution.
    pub record_iterates: bool,
}

impl Default for EsreOptions {
    fn default() -> Self {
        EsreOptions {
            backend: Backend::Ode,
            grid_steps: 2000,
            tree_depth: 10,
            picard_tol: 1e-9,
            picard_max_iter: 60,
            psd_tol: 1e-9,
            cond_threshold: DEFAULT_COND_THRESHOLD,
            smallness_threshold: 0.1,
            assumption_tol: 1e-12,
            form: RiccatiForm::General,
            record_iterates: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub k_estimate: f64,
    pub rho: f64,
    /// `(3/2) e^{ρT} (K² + 1/ρ)`; infinite when `ρ = 0`.
    pub apriori_bound: f64,
    /// `max_{t,i} e^{ρt} |P̃_0(t,i)|²`
    pub measured_sup: f64,
    /// Largest discrete `L²` norm of `Λ` over regimes.
    pub lambda_l2: f64,
    pub smallness: f64,
    pub smallness_exceeded: bool,
}

impl Diagnostics {
    pub fn bound_holds(&self) -> bool {
        self.measured_sup <= self.apriori_bound
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EsreSolution {
    pub lattice: Lattice,
    /// `[regime][node]`, original coordinates.
    pub p: Vec<Vec<SymMatrix>>,
    pub lambda: Vec<Vec<SymMatrix>>,
    pub backend: Backend,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub diagnostics: Diagnostics,
    /// Tilde iterates starting with `P̃_0`, when requested.
    pub iterates: Option<Vec<TildeField>>,
}

impl EsreSolution {
    pub fn ell(&self) -> usize {
        self.p.len()
    }

    pub fn times(&self) -> Vec<f64> {
        self.lattice.node_times()
    }

    /// `P(0, regime)`
    pub fn initial(&self, regime: usize) -> &SymMatrix {
        &self.p[regime][self.lattice.initial_index()]
    }

    pub fn p_tilde(&self, generator: &Generator) -> TildeField {
        tilde_field(&self.p, generator, &self.times())
    }

    pub fn lambda_tilde(&self, generator: &Generator) -> TildeField {
        tilde_field(&self.lambda, generator, &self.times())
    }
}

/// `Π + Q̃ + H + source` for one regime, coefficients already tilde-scaled.
pub(crate) fn regime_rhs(
    c: &NodeCoeffs,
    p: &SymMatrix,
    lam: &SymMatrix,
    source: &SymMatrix,
    opts: &EsreOptions,
) -> Result<SymMatrix> {
    let h = match opts.form {
        RiccatiForm::General => drift_h(c, p, lam, opts.cond_threshold)?,
        RiccatiForm::NoControlNoise => drift_h_no_control_noise(c, p, opts.cond_threshold)?,
    };
    Ok(&(&(&drift_pi(c, p, lam)? + &c.q) + &h) + source)
}

/// The lattice a backend will use for this problem.
pub fn lattice_for(spec: &ProblemSpec, opts: &EsreOptions) -> Result<Lattice> {
    match opts.backend {
        Backend::Ode => {
            if !spec.is_deterministic() {
                return Err(Error::StructuralError(
                    "tree-valued coefficients need the tree backend".into(),
                ));
            }
            if opts.grid_steps == 0 {
                return Err(Error::StructuralError("grid_steps must be >= 1".into()));
            }
            Ok(Lattice::Grid(TimeGrid::new(spec.horizon, opts.grid_steps)))
        }
        Backend::Tree => {
            if opts.tree_depth == 0 {
                return Err(Error::StructuralError("tree_depth must be >= 1".into()));
            }
            if let Some(d) = spec.tree_depth() {
                if d != opts.tree_depth {
                    return Err(Error::StructuralError(format!(
                        "coefficients are given on a tree of depth {d}, solver depth is {}",
                        opts.tree_depth
                    )));
                }
            }
            Ok(Lattice::Tree(BinomialTree::new(spec.horizon, opts.tree_depth)))
        }
    }
}

/// Initial iterate `(P̃_0, Λ̃_0)`: the coupled linear equation without `H`.
pub fn solve_p0(spec: &ProblemSpec, lattice: &Lattice, opts: &EsreOptions) -> Result<(TildeField, TildeField)> {
    match lattice {
        Lattice::Grid(grid) => {
            let p = ode::solve_p0(spec, grid, opts)?;
            let lam = zero_field(spec, lattice);
            Ok((p, lam))
        }
        Lattice::Tree(tree) => tree::solve_p0(spec, tree, opts),
    }
}

/// `(P̃_{k+1}, Λ̃_{k+1})` from `P̃_k`: one decoupled Riccati solve per regime.
pub fn picard_step(
    spec: &ProblemSpec,
    prev: &TildeField,
    lattice: &Lattice,
    opts: &EsreOptions,
) -> Result<(TildeField, TildeField)> {
    if prev.len() != spec.ell() || prev.iter().any(|f| f.len() != lattice.node_count()) {
        return Err(Error::DimensionMismatch(
            "previous iterate does not live on this lattice".into(),
        ));
    }
    match lattice {
        Lattice::Grid(grid) => {
            let p = ode::picard_step(spec, prev, grid, opts)?;
            Ok((p, zero_field(spec, lattice)))
        }
        Lattice::Tree(tree) => tree::picard_step(spec, prev, tree, opts),
    }
}

fn zero_field(spec: &ProblemSpec, lattice: &Lattice) -> TildeField {
    vec![vec![SymMatrix::zeros(spec.n); lattice.node_count()]; spec.ell()]
}

/// `max_{t,i} |P̃_a(t,i) − P̃_b(t,i)|_F`
pub fn sup_difference(a: &TildeField, b: &TildeField) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).frobenius_norm())
        .fold(0.0_f64, f64::max)
}

/// Conservative constant `K` with `|Π(p,λ)| ≤ K|p| + K|λ|`, `|Q| ≤ K`,
/// `|G| ≤ K` and `|q_ij e^{(q_ii−q_jj)t}| ≤ K` over every sample.
pub fn apriori_constant(spec: &ProblemSpec, lattice: &Lattice) -> Result<f64> {
    let ell = spec.ell();
    let times = lattice.node_times();
    let mut k = 0.0_f64;
    for (idx, &t) in times.iter().enumerate() {
        let node = lattice.tree_node(idx);
        for i in 0..ell {
            let c = spec.coeffs_at(t, i, node)?;
            let (a, cn) = (c.a.norm(), c.c.norm());
            k = k.max(2.0 * a + cn * cn).max(2.0 * cn).max(c.q.frobenius_norm());
            for j in 0..ell {
                k = k.max(spec.generator.coupling_weight(i, j, t).abs());
            }
        }
    }
    for idx in lattice.terminal_indices() {
        for i in 0..ell {
            k = k.max(spec.terminal(i, lattice.tree_node(idx))?.frobenius_norm());
        }
    }
    Ok(k)
}

fn diagnostics_with(spec: &ProblemSpec, lattice: &Lattice, opts: &EsreOptions, p0: &TildeField) -> Result<Diagnostics> {
    let k = apriori_constant(spec, lattice)?;
    let ell = spec.ell() as f64;
    let t_end = spec.horizon;
    let rho = (3.0 * (ell - 1.0).powi(2) * t_end + 3.0) * k * k + 3.0 * k;
    let apriori_bound = if rho > 0.0 {
        1.5 * (rho * t_end).exp() * (k * k + 1.0 / rho)
    } else {
        f64::INFINITY
    };
    let times = lattice.node_times();
    let measured_sup = p0
        .iter()
        .flat_map(|field| field.iter().zip(&times))
        .map(|(v, &t)| (rho * t).exp() * v.frobenius_norm().powi(2))
        .fold(0.0_f64, f64::max);
    let smallness = check_smallness(spec, opts.cond_threshold)?;
    Ok(Diagnostics {
        k_estimate: k,
        rho,
        apriori_bound,
        measured_sup,
        lambda_l2: 0.0,
        smallness,
        smallness_exceeded: smallness > opts.smallness_threshold,
    })
}

pub(crate) fn diagnostics(spec: &ProblemSpec, lattice: &Lattice, opts: &EsreOptions) -> Result<Diagnostics> {
    let (p0, _) = solve_p0(spec, lattice, opts)?;
    diagnostics_with(spec, lattice, opts, &p0)
}

/// Discrete `L²(0,T)` norm of a tree field under the binomial measure,
/// maximised over regimes. Zero on a grid.
pub fn lambda_l2_norm(field: &[Vec<SymMatrix>], lattice: &Lattice) -> f64 {
    let Lattice::Tree(tree) = lattice else {
        return 0.0;
    };
    let mut worst = 0.0_f64;
    for values in field {
        let mut probs = vec![1.0];
        let mut total = 0.0;
        for level in 0..tree.depth {
            for (up, pr) in probs.iter().enumerate() {
                let v = &values[tree.index(crate::lattice::TreeNode { level, up })];
                total += tree.dt() * pr * v.frobenius_norm().powi(2);
            }
            let mut next = vec![0.0; level + 2];
            for (up, pr) in probs.iter().enumerate() {
                next[up] += 0.5 * pr;
                next[up + 1] += 0.5 * pr;
            }
            probs = next;
        }
        worst = worst.max(total.sqrt());
    }
    worst
}

/// Runs the Picard scheme to convergence and returns `(P, Λ)` in the
/// original coordinates.
pub fn solve_esre(spec: &ProblemSpec, opts: &EsreOptions) -> Result<EsreSolution> {
    let report = validate_assumptions(spec, opts.assumption_tol)?;
    if !report.passed {
        return Err(Error::AssumptionsViolated(report.to_string()));
    }
    if opts.form == RiccatiForm::NoControlNoise && !spec.d_is_zero() {
        return Err(Error::StructuralError(
            "the D-free Riccati form needs D = 0".into(),
        ));
    }
    let lattice = lattice_for(spec, opts)?;
    let (p0, l0) = solve_p0(spec, &lattice, opts)?;
    let mut diagnostics = diagnostics_with(spec, &lattice, opts, &p0)?;
    let mut iterates = opts.record_iterates.then(|| vec![p0.clone()]);
    let mut residual_history = Vec::new();
    let (mut p, mut lam) = (p0, l0);
    let mut converged = false;
    for _ in 0..opts.picard_max_iter {
        let (next_p, next_l) = picard_step(spec, &p, &lattice, opts)?;
        let residual = sup_difference(&next_p, &p);
        residual_history.push(residual);
        if let Some(its) = iterates.as_mut() {
            its.push(next_p.clone());
        }
        p = next_p;
        lam = next_l;
        if residual <= opts.picard_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            stage: "picard iteration",
            iterations: residual_history.len(),
            last: residual_history.last().copied().unwrap_or(f64::NAN),
            residual_history,
        });
    }
    let times = lattice.node_times();
    let (mut p_orig, lam_orig) = untilde_solution(&p, &lam, &spec.generator, &times);
    for idx in lattice.terminal_indices() {
        for (i, field) in p_orig.iter_mut().enumerate() {
            field[idx] = spec.terminal(i, lattice.tree_node(idx))?;
        }
    }
    diagnostics.lambda_l2 = lambda_l2_norm(&lam_orig, &lattice);
    Ok(EsreSolution {
        lattice,
        p: p_orig,
        lambda: lam_orig,
        backend: opts.backend,
        iterations: residual_history.len(),
        residual_history,
        diagnostics,
        iterates,
    })
}
