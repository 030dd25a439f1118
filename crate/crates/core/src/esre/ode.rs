//! Fixed-step fourth-order backward integration on a uniform grid
//! (deterministic coefficients, `Λ ≡ 0`).

use super::{regime_rhs, EsreOptions, TildeField};
use crate::error::{Error, Result};
use crate::lattice::TimeGrid;
use crate::matcore::SymMatrix;
use crate::model::{tilde_transform, NodeCoeffs, ProblemSpec};
use super::riccati::drift_pi;
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Stage {
    Hi,
    Mid,
    Lo,
}

/// Coefficients on each interval `[t_k, t_{k+1})`, read at `t_k`: `[regime][k]`.
pub(crate) fn interval_coeffs(spec: &ProblemSpec, grid: &TimeGrid) -> Result<Vec<Vec<NodeCoeffs>>> {
    (0..spec.ell())
        .map(|i| {
            (0..grid.steps)
                .map(|k| spec.coeffs_at(grid.time(k), i, None))
                .collect()
        })
        .collect()
}

/// One classical RK4 step from `t_hi` down to `t_hi − dt` for `dy/dt = −f`.
pub(crate) fn rk4_backward<F>(y: &[SymMatrix], dt: f64, mut f: F) -> Result<Vec<SymMatrix>>
where
    F: FnMut(Stage, &[SymMatrix]) -> Result<Vec<SymMatrix>>,
{
    let shift = |base: &[SymMatrix], k: &[SymMatrix], h: f64| -> Vec<SymMatrix> {
        base.iter().zip(k).map(|(b, k)| b.axpy(h, k)).collect()
    };
    let k1 = f(Stage::Hi, y)?;
    let k2 = f(Stage::Mid, &shift(y, &k1, 0.5 * dt))?;
    let k3 = f(Stage::Mid, &shift(y, &k2, 0.5 * dt))?;
    let k4 = f(Stage::Lo, &shift(y, &k3, dt))?;
    Ok((0..y.len())
        .map(|b| {
            let incr = &k1[b].axpy(2.0, &k2[b]).axpy(2.0, &k3[b]) + &k4[b];
            y[b].axpy(dt / 6.0, &incr)
        })
        .collect())
}

pub(crate) fn stage_time(stage: Stage, t_lo: f64, t_hi: f64) -> f64 {
    match stage {
        Stage::Hi => t_hi,
        Stage::Mid => 0.5 * (t_lo + t_hi),
        Stage::Lo => t_lo,
    }
}

/// Clips round-off negativity; a genuinely indefinite value is an error.
pub(crate) fn guard_psd(y: SymMatrix, tol: f64, time: f64, regime: usize) -> Result<SymMatrix> {
    match y.project_psd(tol) {
        Some(p) => Ok(p),
        None => Err(Error::PsdViolation {
            min_eigenvalue: y.min_eigenvalue(),
            tol,
            time,
            regime,
        }),
    }
}

/// Grid indices where the interval coefficients change, plus both ends.
/// The solution is smooth between consecutive entries.
pub(crate) fn smooth_breaks(coeffs: &[Vec<NodeCoeffs>], steps: usize) -> Vec<usize> {
    let same = |x: &NodeCoeffs, y: &NodeCoeffs| {
        x.a == y.a && x.b == y.b && x.c == y.c && x.d == y.d && x.s == y.s && x.q == y.q && x.r == y.r
    };
    let mut breaks = vec![0];
    breaks.extend((1..steps).filter(|&k| coeffs.iter().any(|c| !same(&c[k], &c[k - 1]))));
    breaks.push(steps);
    breaks
}

/// Value of a gridded field at the midpoint of `[t_k, t_{k+1}]` by Lagrange
/// interpolation on up to four samples taken from `lo..=hi`.
pub(crate) fn midpoint(values: &[SymMatrix], k: usize, lo: usize, hi: usize) -> SymMatrix {
    let width = (hi - lo + 1).min(4);
    let start = (k + 1).saturating_sub(width / 2).max(lo).min(hi + 1 - width);
    let x = k as f64 + 0.5;
    let mut acc = SymMatrix::zeros(values[k].dim());
    for a in start..start + width {
        let mut w = 1.0;
        for b in start..start + width {
            if a != b {
                w *= (x - b as f64) / (a as f64 - b as f64);
            }
        }
        acc = acc.axpy(w, &values[a]);
    }
    acc
}

/// Linear coupled system for the initial iterate, all regimes at once.
pub(crate) fn solve_p0(spec: &ProblemSpec, grid: &TimeGrid, opts: &EsreOptions) -> Result<TildeField> {
    let ell = spec.ell();
    let tilde = tilde_transform(spec);
    let coeffs = interval_coeffs(spec, grid)?;
    let dt = grid.dt();
    let zero = SymMatrix::zeros(spec.n);
    let mut out: TildeField = vec![vec![zero.clone(); grid.len()]; ell];
    let mut y: Vec<SymMatrix> = (0..ell).map(|i| tilde.terminal(i, None)).collect::<Result<_>>()?;
    for (i, v) in y.iter().enumerate() {
        out[i][grid.steps] = v.clone();
    }
    for k in (0..grid.steps).rev() {
        let (t_lo, t_hi) = (grid.time(k), grid.time(k + 1));
        let next = rk4_backward(&y, dt, |stage, state| {
            let t = stage_time(stage, t_lo, t_hi);
            (0..ell)
                .map(|i| {
                    let c = &coeffs[i][k];
                    let mut f = &drift_pi(c, &state[i], &zero)? + &c.q.scale(tilde.factor(i, t));
                    for (j, other) in state.iter().enumerate() {
                        if j != i {
                            f = f.axpy(spec.generator.coupling_weight(i, j, t), other);
                        }
                    }
                    Ok(f)
                })
                .collect()
        })?;
        y = next
            .into_iter()
            .enumerate()
            .map(|(i, v)| guard_psd(v, opts.psd_tol, t_lo, i))
            .collect::<Result<_>>()?;
        for (i, v) in y.iter().enumerate() {
            out[i][k] = v.clone();
        }
    }
    Ok(out)
}

/// Decoupled Riccati solves with the cross-regime term frozen at `prev`.
pub(crate) fn picard_step(
    spec: &ProblemSpec,
    prev: &TildeField,
    grid: &TimeGrid,
    opts: &EsreOptions,
) -> Result<TildeField> {
    let tilde = tilde_transform(spec);
    let coeffs = interval_coeffs(spec, grid)?;
    let breaks = smooth_breaks(&coeffs, grid.steps);
    let dt = grid.dt();
    let zero = SymMatrix::zeros(spec.n);
    (0..spec.ell())
        .into_par_iter()
        .map(|i| {
            let mut out = vec![zero.clone(); grid.len()];
            let mut y = tilde.terminal(i, None)?;
            out[grid.steps] = y.clone();
            for k in (0..grid.steps).rev() {
                let (t_lo, t_hi) = (grid.time(k), grid.time(k + 1));
                let seg = breaks.partition_point(|&b| b <= k);
                let (seg_lo, seg_hi) = (breaks[seg - 1], breaks[seg]);
                let source = |stage: Stage| -> SymMatrix {
                    let t = stage_time(stage, t_lo, t_hi);
                    let mut s = zero.clone();
                    for (j, field) in prev.iter().enumerate() {
                        if j == i {
                            continue;
                        }
                        let v = match stage {
                            Stage::Hi => field[k + 1].clone(),
                            Stage::Lo => field[k].clone(),
                            Stage::Mid => midpoint(field, k, seg_lo, seg_hi),
                        };
                        s = s.axpy(spec.generator.coupling_weight(i, j, t), &v);
                    }
                    s
                };
                let src = [source(Stage::Hi), source(Stage::Mid), source(Stage::Lo)];
                let next = rk4_backward(std::slice::from_ref(&y), dt, |stage, state| {
                    let t = stage_time(stage, t_lo, t_hi);
                    let s = match stage {
                        Stage::Hi => &src[0],
                        Stage::Mid => &src[1],
                        Stage::Lo => &src[2],
                    };
                    let c = coeffs[i][k].tilde(tilde.factor(i, t));
                    Ok(vec![regime_rhs(&c, &state[0], &zero, s, opts)?])
                })?;
                y = guard_psd(next.into_iter().next().expect("one block"), opts.psd_tol, t_lo, i)?;
                out[k] = y.clone();
            }
            Ok(out)
        })
        .collect()
}
