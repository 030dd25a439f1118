//! Checks of the forward-backward representation of a Picard iterate in a
//! frozen regime `i`:
//!
//! `dX = (AX + Bu) dt + (CX + Du) dW`, `X(0) = I`,
//! `dY = −(AᵀY + CᵀZ + (Q̃ + src) X + S̃ᵀu) dt + Z dW`, `Y(T) = G̃ X(T)`,
//!
//! with `u = θ̂ X` and `src = Σ_{j≠i} q_ij e^{(q_ii−q_jj)t} P̃_{k−1}(t,j)`.
//! The iterate satisfies `Y = P̃ X`.

use crate::control::FeedbackGain;
use crate::error::{Error, Result};
use crate::esre::{picard_step, theta_hat, EsreOptions, EsreSolution, TildeField};
use crate::lattice::{BinomialTree, Lattice, TreeNode};
use crate::matcore::{sym_inverse, Mat, SymMatrix};
use crate::model::{tilde_transform, ProblemSpec};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Largest supported depth of the non-recombining tree.
pub const MAX_ORACLE_DEPTH: usize = 16;
const SWEEP_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 500;
const DET_GUARD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStats {
    pub rms: f64,
    pub max: f64,
    pub dt: f64,
    pub sample_count: usize,
}

impl ResidualStats {
    fn from_values(values: &[f64], dt: f64) -> Self {
        let rms = (values.iter().map(|v| v * v).sum::<f64>() / values.len().max(1) as f64).sqrt();
        ResidualStats {
            rms,
            max: values.iter().copied().fold(0.0, f64::max),
            dt,
            sample_count: values.len(),
        }
    }
}

/// Solution of the frozen-regime forward-backward system on a
/// non-recombining tree: level `k` holds `2^k` nodes at flat index
/// `2^k − 1 + p`; child `2p + 1` is the up move.
#[derive(Clone, Debug, PartialEq)]
pub struct FbsdeTriple {
    pub regime: usize,
    pub depth: usize,
    pub x: Vec<Mat>,
    pub y: Vec<Mat>,
    pub z: Vec<Mat>,
    pub u: Vec<Mat>,
}

impl FbsdeTriple {
    pub fn index(level: usize, path: usize) -> usize {
        (1 << level) - 1 + path
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeOracleResult {
    pub triple: FbsdeTriple,
    /// `max_nodes |Y X⁻¹ − P̃_k|_F` against the tree Picard step.
    pub deviation: f64,
    pub sweeps: usize,
    pub sweep_history: Vec<f64>,
}

fn fro(m: &Mat) -> f64 {
    m.norm()
}

/// Measures `|Y(t+dt) − Y(t) + f dt − Z ΔW| / dt` along an Euler path of the
/// closed loop with `Y := P̃ X`, for each step size in `dts`. All step sizes
/// share one Brownian path drawn at the solution resolution.
pub fn ypx_residual(
    solution: &EsreSolution,
    spec: &ProblemSpec,
    regime: usize,
    dts: &[f64],
    seed: u64,
    cond: f64,
) -> Result<Vec<ResidualStats>> {
    let Lattice::Grid(grid) = solution.lattice else {
        return Err(Error::StructuralError(
            "the path residual needs a solution on a time grid".into(),
        ));
    };
    if regime >= spec.ell() {
        return Err(Error::OutOfRange(format!("regime {regime} outside 0..{}", spec.ell())));
    }
    let tilde = tilde_transform(spec);
    let p_t = solution.p_tilde(&spec.generator);
    let l_t = solution.lambda_tilde(&spec.generator);
    let times = solution.times();
    let n = spec.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fine: Vec<f64> = (0..grid.steps)
        .map(|_| grid.dt().sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    dts.iter()
        .map(|&dt| {
            let ratio = dt / grid.dt();
            let stride = ratio.round() as usize;
            if stride == 0 || (ratio - stride as f64).abs() > 1e-9 * ratio {
                return Err(Error::OutOfRange(format!(
                    "step {dt} is not a multiple of the solution step {}",
                    grid.dt()
                )));
            }
            let steps = grid.steps / stride;
            let mut x = Mat::identity(n, n);
            let mut defects = Vec::with_capacity(steps);
            let p_at = |k: usize| &p_t[regime][k * stride];
            let y0 = p_at(0).as_mat() * &x;
            if (&y0 - p_t[regime][0].as_mat()).norm() > 1e-12 {
                return Err(Error::StructuralError("Y(0) differs from P(0)".into()));
            }
            for k in 0..steps {
                let idx = k * stride;
                let t = times[idx];
                let c = spec.coeffs_at(t, regime, None)?.tilde(tilde.factor(regime, t));
                let p = p_at(k);
                let lam = &l_t[regime][idx];
                let theta = theta_hat(&c, p, lam, cond)?;
                let u = &theta * &x;
                let b = &c.a * &x + &c.b * &u;
                let sigma = &c.c * &x + &c.d * &u;
                let y = p.as_mat() * &x;
                let z = lam.as_mat() * &x + p.as_mat() * &sigma;
                let mut src = SymMatrix::zeros(n);
                for j in (0..spec.ell()).filter(|&j| j != regime) {
                    src = src.axpy(spec.generator.coupling_weight(regime, j, t), &p_t[j][idx]);
                }
                let f = c.a.transpose() * &y
                    + c.c.transpose() * &z
                    + (c.q.as_mat() + src.as_mat()) * &x
                    + c.s.transpose() * &u;
                let dw: f64 = fine[idx..idx + stride].iter().sum();
                let x_next = &x + &b * dt + &sigma * dw;
                let y_next = p_at(k + 1).as_mat() * &x_next;
                let defect = &y_next - &y + &f * dt - &z * dw;
                defects.push(fro(&defect) / dt);
                x = x_next;
            }
            Ok(ResidualStats::from_values(&defects, dt))
        })
        .collect()
}

/// Closed-loop pieces at one recombining node (`D ≡ 0`).
struct NodeSystem {
    /// forward drift `MX X + MY Y`, diffusion `C X`
    mx: Mat,
    my: Mat,
    c: Mat,
    /// driver `FX X + FY Y + FZ Z`
    fx: Mat,
    fy: Mat,
    fz: Mat,
    /// `u = UX X + UY Y`
    ux: Mat,
    uy: Mat,
}

fn inverse_2x2_or_less(m: &Mat, level: usize) -> Result<Mat> {
    let det = m.determinant();
    if !(det.abs() >= DET_GUARD) {
        return Err(Error::SingularState { level, det: det.abs() });
    }
    m.clone().try_inverse().ok_or(Error::SingularState { level, det: det.abs() })
}

/// Solves the forward-backward system on a non-recombining tree by a global
/// fixed point (backward sweep for `(Y, Z)` given `X`, forward sweep for `X`
/// given `Y`) and compares `Y X⁻¹` with the tree Picard step from `prev`.
pub fn tree_fbsde_oracle(
    spec: &ProblemSpec,
    depth: usize,
    prev: &TildeField,
    regime: usize,
    opts: &EsreOptions,
) -> Result<TreeOracleResult> {
    if !spec.d_is_zero() {
        return Err(Error::StructuralError("the tree oracle needs D = 0".into()));
    }
    if spec.n > 2 {
        return Err(Error::StructuralError("the tree oracle supports n <= 2".into()));
    }
    if depth == 0 || depth > MAX_ORACLE_DEPTH {
        return Err(Error::OutOfRange(format!(
            "oracle depth {depth} outside 1..={MAX_ORACLE_DEPTH}"
        )));
    }
    if regime >= spec.ell() {
        return Err(Error::OutOfRange(format!("regime {regime} outside 0..{}", spec.ell())));
    }
    let tree = BinomialTree::new(spec.horizon, depth);
    let lattice = Lattice::Tree(tree);
    let (next, _) = picard_step(spec, prev, &lattice, opts)?;
    let tilde = tilde_transform(spec);
    let n = spec.n;
    let dt = tree.dt();
    let sq = dt.sqrt();

    let systems: Vec<NodeSystem> = tree
        .nodes()
        .map(|nd| {
            let t = tree.time(nd.level);
            let c = spec.coeffs_at(t, regime, Some(nd))?.tilde(tilde.factor(regime, t));
            let r_inv = sym_inverse(&c.r, opts.cond_threshold)?.into_mat();
            let idx = tree.index(nd);
            let mut src = SymMatrix::zeros(n);
            for j in (0..spec.ell()).filter(|&j| j != regime) {
                src = src.axpy(spec.generator.coupling_weight(regime, j, t), &prev[j][idx]);
            }
            let ux = -(&r_inv * &c.s);
            let uy = -(&r_inv * c.b.transpose());
            Ok(NodeSystem {
                mx: &c.a + &c.b * &ux,
                my: &c.b * &uy,
                fx: c.q.as_mat() + src.as_mat() + c.s.transpose() * &ux,
                fy: c.a.transpose() + c.s.transpose() * &uy,
                fz: c.c.transpose(),
                c: c.c.clone(),
                ux,
                uy,
            })
        })
        .collect::<Result<_>>()?;

    let total = (1usize << (depth + 1)) - 1;
    let rec = |level: usize, path: usize| tree.index(TreeNode {
        level,
        up: path.count_ones() as usize,
    });
    let leaf_g: Vec<Mat> = (0..=depth)
        .map(|up| Ok(tilde.terminal(regime, Some(TreeNode { level: depth, up }))?.into_mat()))
        .collect::<Result<_>>()?;

    let backward = |x: &[Mat]| -> (Vec<Mat>, Vec<Mat>) {
        let mut y = vec![Mat::zeros(n, n); total];
        let mut z = vec![Mat::zeros(n, n); total];
        for path in 0..(1usize << depth) {
            let idx = FbsdeTriple::index(depth, path);
            y[idx] = &leaf_g[path.count_ones() as usize] * &x[idx];
        }
        for level in (0..depth).rev() {
            for path in 0..(1usize << level) {
                let idx = FbsdeTriple::index(level, path);
                let down = &y[FbsdeTriple::index(level + 1, 2 * path)];
                let up = &y[FbsdeTriple::index(level + 1, 2 * path + 1)];
                let e = (up + down) * 0.5;
                let zz = (up - down) * (0.5 / sq);
                let sys = &systems[rec(level, path)];
                let f = &sys.fx * &x[idx] + &sys.fy * &e + &sys.fz * &zz;
                y[idx] = e + f * dt;
                z[idx] = zz;
            }
        }
        (y, z)
    };

    let mut x = vec![Mat::identity(n, n); total];
    let mut y = vec![Mat::zeros(n, n); total];
    let mut omega = 1.0;
    let mut history = Vec::new();
    let mut last_change = f64::INFINITY;
    let mut converged = false;

    for _ in 0..MAX_SWEEPS {
        let (y_new, _) = backward(&x);
        // forward sweep
        let mut x_new = vec![Mat::identity(n, n); total];
        for level in 0..depth {
            for path in 0..(1usize << level) {
                let idx = FbsdeTriple::index(level, path);
                let sys = &systems[rec(level, path)];
                let drift = &sys.mx * &x_new[idx] + &sys.my * &y_new[idx];
                let diff = &sys.c * &x_new[idx];
                let base = &x_new[idx] + drift * dt;
                x_new[FbsdeTriple::index(level + 1, 2 * path)] = &base - &diff * sq;
                x_new[FbsdeTriple::index(level + 1, 2 * path + 1)] = &base + &diff * sq;
            }
        }
        let change = x_new
            .iter()
            .zip(&x)
            .map(|(a, b)| fro(&(a - b)))
            .chain(y_new.iter().zip(&y).map(|(a, b)| fro(&(a - b))))
            .fold(0.0_f64, f64::max);
        history.push(change);
        if change > last_change && omega > 1.0 / 64.0 {
            omega *= 0.5;
        }
        last_change = change;
        for (old, new) in x.iter_mut().zip(x_new) {
            *old = &*old * (1.0 - omega) + new * omega;
        }
        y = y_new;
        if change < SWEEP_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            stage: "forward-backward sweeps",
            iterations: MAX_SWEEPS,
            last: last_change,
            residual_history: history,
        });
    }
    // (Y, Z) consistent with the final X, so that Y(T) = G̃ X(T) holds exactly
    let (y, z) = backward(&x);

    let mut deviation = 0.0_f64;
    let mut u = vec![Mat::zeros(spec.m, n); total];
    for level in 0..=depth {
        for path in 0..(1usize << level) {
            let idx = FbsdeTriple::index(level, path);
            let r = rec(level, path);
            let inv = inverse_2x2_or_less(&x[idx], level)?;
            let implied = &y[idx] * inv;
            deviation = deviation.max(fro(&(implied - next[regime][r].as_mat())));
            let sys = &systems[r];
            u[idx] = &sys.ux * &x[idx] + &sys.uy * &y[idx];
        }
    }
    Ok(TreeOracleResult {
        triple: FbsdeTriple {
            regime,
            depth,
            x,
            y,
            z,
            u,
        },
        deviation,
        sweeps: history.len(),
        sweep_history: history,
    })
}

/// `X` and the separately integrated `X⁻¹` of the closed loop in a frozen
/// regime: `dX = A_k X dt + C_k X dW`,
/// `dX⁻¹ = −X⁻¹(A_k − C_k²) dt − X⁻¹ C_k dW`, with `A_k = A + Bθ̂`,
/// `C_k = C + Dθ̂`. Drifts use Heun's method, noise an Euler increment.
pub fn inverse_state_paths(
    spec: &ProblemSpec,
    regime: usize,
    gains: &FeedbackGain,
    dt: f64,
    seed: u64,
) -> Result<(Vec<Mat>, Vec<Mat>)> {
    if !spec.is_deterministic() {
        return Err(Error::StructuralError(
            "the inverse-state check needs deterministic coefficients".into(),
        ));
    }
    let steps = (spec.horizon / dt).round() as usize;
    if steps == 0 || ((spec.horizon / dt) - steps as f64).abs() > 1e-9 * steps as f64 {
        return Err(Error::OutOfRange(format!(
            "time step {dt} does not divide the horizon {}",
            spec.horizon
        )));
    }
    let n = spec.n;
    let closed = |t: f64, w: f64| -> Result<(Mat, Mat)> {
        let c = spec.coeffs_at(t.min(spec.horizon), regime, None)?;
        let k = gains.at(t, w, regime);
        Ok((&c.a + &c.b * k, &c.c + &c.d * k))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Mat::identity(n, n);
    let mut xi = Mat::identity(n, n);
    let mut xs = vec![x.clone()];
    let mut xis = vec![xi.clone()];
    let mut w = 0.0;
    for k in 0..steps {
        let t = k as f64 * dt;
        let t_next = if k + 1 == steps { spec.horizon } else { (k + 1) as f64 * dt };
        let dw = dt.sqrt() * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let (a0, c0) = closed(t, w)?;
        let (a1, c1) = closed(t_next, w + dw)?;
        let ito0 = &a0 - &c0 * &c0;
        let ito1 = &a1 - &c1 * &c1;
        let fx0 = &a0 * &x;
        let x_pred = &x + &fx0 * dt;
        let x_next = &x + (fx0 + &a1 * x_pred) * (0.5 * dt) + &c0 * &x * dw;
        let fi0 = -(&xi * ito0);
        let xi_pred = &xi + &fi0 * dt;
        let xi_next = &xi + (fi0 - xi_pred * ito1) * (0.5 * dt) - &xi * &c0 * dw;
        x = x_next;
        xi = xi_next;
        w += dw;
        xs.push(x.clone());
        xis.push(xi.clone());
    }
    Ok((xs, xis))
}

/// Deviation of `X · X⁻¹` from the identity along [`inverse_state_paths`].
pub fn xinv_product_check(
    spec: &ProblemSpec,
    regime: usize,
    gains: &FeedbackGain,
    dt: f64,
    seed: u64,
) -> Result<ResidualStats> {
    let (xs, xis) = inverse_state_paths(spec, regime, gains, dt, seed)?;
    let id = Mat::identity(spec.n, spec.n);
    let devs: Vec<f64> = xs.iter().zip(&xis).skip(1).map(|(x, xi)| fro(&(x * xi - &id))).collect();
    Ok(ResidualStats::from_values(&devs, dt))
}

/// Least-squares slope of `log(err)` against `log(h)`.
pub fn fitted_order(hs: &[f64], errs: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = hs.iter().zip(errs).map(|(h, e)| (h.ln(), e.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Evaluates `Y = P̃ X` for a single state vector; handy for reports.
pub fn implied_adjoint(p_tilde: &SymMatrix, x: &DVector<f64>) -> DVector<f64> {
    p_tilde.as_mat() * x
}
