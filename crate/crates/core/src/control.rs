//! Feedback synthesis and Monte Carlo evaluation of the closed loop.
//!
//! Paths use an Euler–Maruyama step for the state, an exactly sampled regime
//! path, and left-endpoint quadrature for the running cost. Each path owns
//! two ChaCha8 substreams of the master seed (`2p` for the chain, `2p + 1`
//! for the Brownian increments), so estimates do not depend on scheduling.

use crate::error::{Error, Result};
use crate::esre::{gain_numerator, EsreSolution};
use crate::lattice::{BinomialTree, Lattice};
use crate::matcore::{sym_inverse, Mat, SymMatrix};
use crate::model::{NodeCoeffs, ProblemSpec};
use crate::regime_chain::{sample_chain_path, transition_matrix};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

const BLOW_UP: f64 = 1e8;

/// `u = K(t, i) X` on the solution lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackGain {
    pub lattice: Lattice,
    /// `[regime][node]`, each m×n.
    pub k: Vec<Vec<Mat>>,
}

impl FeedbackGain {
    /// Gain at the last sample at or before `t` (nearest tree node to `w`).
    pub fn at(&self, t: f64, w: f64, regime: usize) -> &Mat {
        &self.k[regime][lattice_index(&self.lattice, t, w)]
    }
}

fn lattice_index(lattice: &Lattice, t: f64, w: f64) -> usize {
    match lattice {
        Lattice::Grid(g) => g.sample_at_or_before(t),
        Lattice::Tree(tree) => tree.index(tree.locate(t, w)),
    }
}

/// `K = −(R + DᵀPD)⁻¹(BᵀP + DᵀPC + DᵀΛ + S)` at every sample and regime.
pub fn feedback_gain(solution: &EsreSolution, spec: &ProblemSpec, cond: f64) -> Result<FeedbackGain> {
    let times = solution.times();
    let k = (0..solution.ell())
        .map(|i| {
            times
                .iter()
                .enumerate()
                .map(|(idx, &t)| {
                    let c = spec.coeffs_at(t, i, solution.lattice.tree_node(idx))?;
                    let p = &solution.p[i][idx];
                    let hess = &c.r + &p.congruence(&c.d);
                    let inv = sym_inverse(&hess, cond)?;
                    Ok(-(inv.as_mat() * gain_numerator(&c, p, &solution.lambda[i][idx])))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(FeedbackGain {
        lattice: solution.lattice,
        k,
    })
}

/// Open-loop deviation `e(t)` added to the feedback control.
#[derive(Clone, Debug, PartialEq)]
pub enum Perturbation {
    Zero,
    Constant(DVector<f64>),
    /// `e(t) = slope · t`
    Linear { slope: DVector<f64> },
    /// Piecewise constant, left samples; the first time must be 0.
    Table(Vec<(f64, DVector<f64>)>),
}

impl Perturbation {
    pub fn at(&self, t: f64, m: usize) -> DVector<f64> {
        match self {
            Perturbation::Zero => DVector::zeros(m),
            Perturbation::Constant(v) => v.clone(),
            Perturbation::Linear { slope } => slope * t,
            Perturbation::Table(table) => {
                let k = table.partition_point(|(s, _)| *s <= t + 1e-12);
                table[k.saturating_sub(1)].1.clone()
            }
        }
    }

    /// Writes `e(t)` into `out` without allocating.
    fn fill(&self, t: f64, out: &mut [f64]) {
        match self {
            Perturbation::Zero => out.fill(0.0),
            Perturbation::Constant(v) => out.copy_from_slice(v.as_slice()),
            Perturbation::Linear { slope } => {
                for (o, s) in out.iter_mut().zip(slope.iter()) {
                    *o = s * t;
                }
            }
            Perturbation::Table(table) => {
                let k = table.partition_point(|(s, _)| *s <= t + 1e-12);
                out.copy_from_slice(table[k.saturating_sub(1)].1.as_slice());
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Perturbation::Zero)
    }

    fn check(&self, m: usize) -> Result<()> {
        let dims_ok = match self {
            Perturbation::Zero => true,
            Perturbation::Constant(v) | Perturbation::Linear { slope: v } => v.len() == m,
            Perturbation::Table(t) => {
                !t.is_empty() && t[0].0 == 0.0 && t.iter().all(|(_, v)| v.len() == m)
            }
        };
        if dims_ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "perturbation must be {m}-dimensional (tables start at t = 0)"
            )))
        }
    }
}

/// Feedback gain plus an optional open-loop perturbation.
#[derive(Clone, Copy, Debug)]
pub struct Policy<'a> {
    pub gain: &'a FeedbackGain,
    pub perturbation: &'a Perturbation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathRecord {
    pub times: Vec<f64>,
    pub x: Vec<DVector<f64>>,
    /// Regime in force at each time (right-continuous).
    pub regimes: Vec<usize>,
    /// Control applied on `[t_k, t_{k+1})`; one fewer entry than `times`.
    pub u: Vec<DVector<f64>>,
    /// Running cost accumulated up to each time.
    pub running_cost: Vec<f64>,
    /// Running cost plus the terminal term.
    pub total_cost: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapEstimate {
    pub gap: f64,
    /// Standard error of the paired differences.
    pub std_error: f64,
    /// `∫ E⟨(R + DᵀPD) e, e⟩ dt` when `P` and `e` are deterministic.
    pub theoretical: Option<f64>,
    pub feedback: CostEstimate,
    pub perturbed: CostEstimate,
}

/// Coefficients in row-major flat buffers for the inner loop.
#[derive(Clone, Debug)]
struct Flat {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
    q: Vec<f64>,
    s: Vec<f64>,
    r: Vec<f64>,
}

fn flat(m: &Mat) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

impl Flat {
    fn new(c: &NodeCoeffs) -> Self {
        Flat {
            a: flat(&c.a),
            b: flat(&c.b),
            c: flat(&c.c),
            d: flat(&c.d),
            q: flat(c.q.as_mat()),
            s: flat(&c.s),
            r: flat(c.r.as_mat()),
        }
    }
}

/// `out (+)= M x` for row-major `M` with `cols = x.len()`.
#[inline]
fn gemv(m: &[f64], x: &[f64], out: &mut [f64], accumulate: bool) {
    let cols = x.len();
    for (row, o) in out.iter_mut().enumerate() {
        let mut acc = if accumulate { *o } else { 0.0 };
        for (mv, xv) in m[row * cols..(row + 1) * cols].iter().zip(x) {
            acc += mv * xv;
        }
        *o = acc;
    }
}

#[inline]
fn quad(m: &[f64], x: &[f64], y: &[f64]) -> f64 {
    // yᵀ M x with M of shape len(y)×len(x)
    let cols = x.len();
    y.iter()
        .enumerate()
        .map(|(row, yv)| yv * m[row * cols..(row + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

enum CoeffTable {
    /// `[regime][step]`
    Steps(Vec<Vec<Flat>>),
    /// `[regime][node]`
    Tree(BinomialTree, Vec<Vec<Flat>>),
}

/// Everything a path needs, evaluated once.
struct Engine<'a> {
    spec: &'a ProblemSpec,
    n: usize,
    m: usize,
    dt: f64,
    steps: usize,
    coeffs: CoeffTable,
    /// `[regime]` flat `G`, or `[regime][leaf]` for tree-valued `G`.
    terminal: Vec<Vec<Vec<f64>>>,
    gain_lattice: Lattice,
    gains: Vec<Vec<Vec<f64>>>,
}

impl<'a> Engine<'a> {
    fn new(spec: &'a ProblemSpec, gain: &FeedbackGain, dt: f64) -> Result<Self> {
        let ratio = spec.horizon / dt;
        let steps = ratio.round();
        if !(dt > 0.0) || steps < 1.0 || (ratio - steps).abs() > 1e-12 * ratio.max(1.0) * 16.0 {
            return Err(Error::OutOfRange(format!(
                "time step {dt} does not divide the horizon {}",
                spec.horizon
            )));
        }
        let steps = steps as usize;
        if gain.k.len() != spec.ell() {
            return Err(Error::DimensionMismatch("gain has the wrong number of regimes".into()));
        }
        let coeffs = match spec.tree_depth() {
            Some(depth) => {
                let tree = BinomialTree::new(spec.horizon, depth);
                let table = (0..spec.ell())
                    .map(|i| {
                        tree.nodes()
                            .map(|nd| Ok(Flat::new(&spec.coeffs_at(tree.time(nd.level), i, Some(nd))?)))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?;
                CoeffTable::Tree(tree, table)
            }
            None => CoeffTable::Steps(
                (0..spec.ell())
                    .map(|i| {
                        (0..steps)
                            .map(|k| Ok(Flat::new(&spec.coeffs_at(step_time(k, steps, dt, spec.horizon), i, None)?)))
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        let terminal = (0..spec.ell())
            .map(|i| match spec.tree_depth() {
                Some(depth) => (0..=depth)
                    .map(|up| {
                        Ok(flat(
                            spec.terminal(i, Some(crate::lattice::TreeNode { level: depth, up }))?
                                .as_mat(),
                        ))
                    })
                    .collect::<Result<Vec<_>>>(),
                None => Ok(vec![flat(spec.terminal(i, None)?.as_mat())]),
            })
            .collect::<Result<_>>()?;
        let gains = gain
            .k
            .iter()
            .map(|per| per.iter().map(flat).collect())
            .collect();
        Ok(Engine {
            spec,
            n: spec.n,
            m: spec.m,
            dt,
            steps,
            coeffs,
            terminal,
            gain_lattice: gain.lattice,
            gains,
        })
    }

    fn coeffs(&self, regime: usize, k: usize, t: f64, w: f64) -> &Flat {
        match &self.coeffs {
            CoeffTable::Steps(table) => &table[regime][k],
            CoeffTable::Tree(tree, table) => &table[regime][tree.index(tree.locate(t, w))],
        }
    }

    fn terminal(&self, regime: usize, w: f64) -> &[f64] {
        match &self.coeffs {
            CoeffTable::Tree(tree, _) => &self.terminal[regime][tree.locate(self.spec.horizon, w).up],
            CoeffTable::Steps(_) => &self.terminal[regime][0],
        }
    }

    /// Simulates one path for several perturbations on common random numbers.
    fn run(
        &self,
        x0: &[f64],
        i0: usize,
        seed: u64,
        path: usize,
        perturbations: &[&Perturbation],
        mut record: Option<&mut PathRecord>,
    ) -> Result<Vec<f64>> {
        let (n, m, dt) = (self.n, self.m, self.dt);
        let mut chain_rng = ChaCha8Rng::seed_from_u64(seed);
        chain_rng.set_stream(2 * path as u64);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(2 * path as u64 + 1);
        let regimes = sample_chain_path(&self.spec.generator, i0, self.spec.horizon, &mut chain_rng)?;
        let variants = perturbations.len();
        let mut x: Vec<Vec<f64>> = vec![x0.to_vec(); variants];
        let mut cost = vec![0.0; variants];
        let (mut u, mut drift, mut diff) = (vec![0.0; m], vec![0.0; n], vec![0.0; n]);
        let mut e_buf: Vec<Vec<f64>> = vec![vec![0.0; m]; variants];
        let sqrt_dt = dt.sqrt();
        let mut w = 0.0;
        let mut next_jump = 0;
        let mut regime = i0;
        for k in 0..self.steps {
            let t = step_time(k, self.steps, dt, self.spec.horizon);
            while next_jump < regimes.jump_times.len() && regimes.jump_times[next_jump] <= t {
                next_jump += 1;
                regime = regimes.states[next_jump];
            }
            let cf = self.coeffs(regime, k, t, w);
            let gain = &self.gains[regime][lattice_index(&self.gain_lattice, t, w)];
            let dw: f64 = sqrt_dt * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut noise_rng);
            for v in 0..variants {
                let xs = &mut x[v];
                gemv(gain, xs, &mut u, false);
                if !perturbations[v].is_zero() {
                    perturbations[v].fill(t, &mut e_buf[v]);
                    for (uj, ej) in u.iter_mut().zip(&e_buf[v]) {
                        *uj += ej;
                    }
                }
                cost[v] += dt * (quad(&cf.q, xs, xs) + 2.0 * quad(&cf.s, xs, &u) + quad(&cf.r, &u, &u));
                gemv(&cf.a, xs, &mut drift, false);
                gemv(&cf.b, &u, &mut drift, true);
                gemv(&cf.c, xs, &mut diff, false);
                gemv(&cf.d, &u, &mut diff, true);
                if let (0, Some(rec)) = (v, record.as_deref_mut()) {
                    rec.u.push(DVector::from_column_slice(&u));
                }
                let mut norm = 0.0;
                for ((xi, bi), si) in xs.iter_mut().zip(&drift).zip(&diff) {
                    *xi += bi * dt + si * dw;
                    norm += *xi * *xi;
                }
                let norm = norm.sqrt();
                if !(norm <= BLOW_UP) {
                    return Err(Error::BlowUp {
                        path,
                        time: t + dt,
                        norm,
                    });
                }
            }
            w += dw;
            if let Some(rec) = record.as_deref_mut() {
                rec.times.push(step_time(k + 1, self.steps, dt, self.spec.horizon));
                rec.x.push(DVector::from_column_slice(&x[0]));
                rec.running_cost.push(cost[0]);
            }
        }
        let terminal_regime = regimes.terminal_state();
        let g = self.terminal(terminal_regime, w);
        for v in 0..variants {
            cost[v] += quad(g, &x[v], &x[v]);
        }
        if let Some(rec) = record {
            rec.regimes = rec.times.iter().map(|&t| regimes.state_at(t)).collect();
            rec.total_cost = cost[0];
        }
        Ok(cost)
    }
}

fn step_time(k: usize, steps: usize, dt: f64, horizon: f64) -> f64 {
    if k == steps {
        horizon
    } else {
        k as f64 * dt
    }
}

fn check_start(spec: &ProblemSpec, x0: &DVector<f64>, i0: usize) -> Result<()> {
    if x0.len() != spec.n {
        return Err(Error::DimensionMismatch(format!(
            "initial state has length {}, expected {}",
            x0.len(),
            spec.n
        )));
    }
    if i0 >= spec.ell() {
        return Err(Error::OutOfRange(format!("initial regime {i0} outside 0..{}", spec.ell())));
    }
    Ok(())
}

/// One recorded closed-loop path (substreams of `seed` for path index `path`).
pub fn simulate_closed_loop(
    spec: &ProblemSpec,
    policy: Policy<'_>,
    x0: &DVector<f64>,
    i0: usize,
    dt: f64,
    seed: u64,
    path: usize,
) -> Result<PathRecord> {
    check_start(spec, x0, i0)?;
    policy.perturbation.check(spec.m)?;
    let engine = Engine::new(spec, policy.gain, dt)?;
    let mut rec = PathRecord {
        times: vec![0.0],
        x: vec![x0.clone()],
        regimes: Vec::new(),
        u: Vec::new(),
        running_cost: vec![0.0],
        total_cost: 0.0,
    };
    engine.run(x0.as_slice(), i0, seed, path, &[policy.perturbation], Some(&mut rec))?;
    Ok(rec)
}

/// Runs all paths; costs per variant, in path order.
fn run_paths(
    engine: &Engine<'_>,
    x0: &DVector<f64>,
    i0: usize,
    n_paths: usize,
    seed: u64,
    perturbations: &[&Perturbation],
) -> Result<Vec<Vec<f64>>> {
    let results: Vec<Result<Vec<f64>>> = (0..n_paths)
        .into_par_iter()
        .map(|p| engine.run(x0.as_slice(), i0, seed, p, perturbations, None))
        .collect();
    results.into_iter().collect()
}

/// Neumaier-compensated sum, evaluated in the given order.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    let var = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn estimate(values: &[f64], dt: f64, seed: u64) -> CostEstimate {
    let (mean, std_error) = mean_and_se(values);
    CostEstimate {
        mean,
        std_error,
        n_paths: values.len(),
        dt,
        seed,
    }
}

fn check_paths(n_paths: usize) -> Result<()> {
    if n_paths < 2 {
        return Err(Error::OutOfRange(format!("need at least 2 paths, got {n_paths}")));
    }
    Ok(())
}

/// Sample mean and standard error of the cost over `n_paths` paths.
pub fn mc_cost(
    spec: &ProblemSpec,
    policy: Policy<'_>,
    x0: &DVector<f64>,
    i0: usize,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<CostEstimate> {
    check_start(spec, x0, i0)?;
    check_paths(n_paths)?;
    policy.perturbation.check(spec.m)?;
    let engine = Engine::new(spec, policy.gain, dt)?;
    let costs = run_paths(&engine, x0, i0, n_paths, seed, &[policy.perturbation])?;
    let values: Vec<f64> = costs.iter().map(|c| c[0]).collect();
    Ok(estimate(&values, dt, seed))
}

/// `xᵀ P(0, i0) x`
pub fn value_at(solution: &EsreSolution, x0: &DVector<f64>, i0: usize) -> f64 {
    solution.initial(i0).quad_form(x0)
}

/// `∫ Σ_i P(α_t = i) ⟨(R + DᵀPD)(t,i) e(t), e(t)⟩ dt` by left-endpoint
/// quadrature; `None` when `P` depends on the Brownian path.
pub fn theoretical_gap(
    spec: &ProblemSpec,
    solution: &EsreSolution,
    perturbation: &Perturbation,
    i0: usize,
    dt: f64,
) -> Result<Option<f64>> {
    if !spec.is_deterministic() {
        return Ok(None);
    }
    let steps = (spec.horizon / dt).round() as usize;
    let mut total = 0.0;
    for k in 0..steps {
        let t = step_time(k, steps, dt, spec.horizon);
        let e = perturbation.at(t, spec.m);
        let probs = transition_matrix(&spec.generator, t)?;
        let idx = lattice_index(&solution.lattice, t, 0.0);
        for i in 0..spec.ell() {
            let c = spec.coeffs_at(t, i, solution.lattice.tree_node(idx))?;
            let hess: SymMatrix = &c.r + &solution.p[i][idx].congruence(&c.d);
            total += dt * probs[(i0, i)] * hess.quad_form(&e);
        }
    }
    Ok(Some(total))
}

/// Cost of `u* + e` minus cost of `u*` on common random numbers.
#[allow(clippy::too_many_arguments)]
pub fn optimality_gap(
    spec: &ProblemSpec,
    solution: &EsreSolution,
    gain: &FeedbackGain,
    perturbation: &Perturbation,
    x0: &DVector<f64>,
    i0: usize,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<GapEstimate> {
    check_start(spec, x0, i0)?;
    check_paths(n_paths)?;
    perturbation.check(spec.m)?;
    let engine = Engine::new(spec, gain, dt)?;
    let costs = run_paths(&engine, x0, i0, n_paths, seed, &[&Perturbation::Zero, perturbation])?;
    let base: Vec<f64> = costs.iter().map(|c| c[0]).collect();
    let pert: Vec<f64> = costs.iter().map(|c| c[1]).collect();
    let diffs: Vec<f64> = costs.iter().map(|c| c[1] - c[0]).collect();
    let (gap, std_error) = mean_and_se(&diffs);
    Ok(GapEstimate {
        gap,
        std_error,
        theoretical: theoretical_gap(spec, solution, perturbation, i0, dt)?,
        feedback: estimate(&base, dt, seed),
        perturbed: estimate(&pert, dt, seed),
    })
}
