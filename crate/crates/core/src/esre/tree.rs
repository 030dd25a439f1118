//! Explicit backward induction on the recombining binomial tree.

use super::ode::guard_psd;
use super::riccati::drift_pi;
use super::{regime_rhs, EsreOptions, TildeField};
use crate::error::{Error, Result};
use crate::lattice::{BinomialTree, TreeNode};
use crate::matcore::SymMatrix;
use crate::model::{tilde_transform, NodeCoeffs, ProblemSpec};
use rayon::prelude::*;

const COUPLING_TOL: f64 = 1e-14;
const COUPLING_MAX_ITER: usize = 200;

/// Coefficients at every node: `[regime][node index]`.
pub(crate) fn node_coeffs(spec: &ProblemSpec, tree: &BinomialTree) -> Result<Vec<Vec<NodeCoeffs>>> {
    (0..spec.ell())
        .map(|i| {
            tree.nodes()
                .map(|nd| spec.coeffs_at(tree.time(nd.level), i, Some(nd)))
                .collect()
        })
        .collect()
}

/// Conditional expectation and martingale integrand from the two children.
pub(crate) fn expectation_and_z(
    field: &[SymMatrix],
    tree: &BinomialTree,
    node: TreeNode,
) -> (SymMatrix, SymMatrix) {
    let up = &field[tree.index(TreeNode {
        level: node.level + 1,
        up: node.up + 1,
    })];
    let down = &field[tree.index(TreeNode {
        level: node.level + 1,
        up: node.up,
    })];
    let e = up.axpy(1.0, down).scale(0.5);
    let z = up.axpy(-1.0, down).scale(0.5 / tree.dt().sqrt());
    (e, z)
}

fn terminal_values(spec: &ProblemSpec, tree: &BinomialTree, regime: usize) -> Result<Vec<(usize, SymMatrix)>> {
    let tilde = tilde_transform(spec);
    (0..=tree.depth)
        .map(|up| {
            let leaf = TreeNode {
                level: tree.depth,
                up,
            };
            Ok((tree.index(leaf), tilde.terminal(regime, Some(leaf))?))
        })
        .collect()
}

/// Initial iterate: linear backward induction; the regime coupling at each
/// node is resolved by an inner fixed point.
pub(crate) fn solve_p0(
    spec: &ProblemSpec,
    tree: &BinomialTree,
    opts: &EsreOptions,
) -> Result<(TildeField, TildeField)> {
    let ell = spec.ell();
    let tilde = tilde_transform(spec);
    let coeffs = node_coeffs(spec, tree)?;
    let dt = tree.dt();
    let zero = SymMatrix::zeros(spec.n);
    let mut p: TildeField = vec![vec![zero.clone(); tree.node_count()]; ell];
    let mut lam = p.clone();
    for (i, field) in p.iter_mut().enumerate() {
        for (idx, v) in terminal_values(spec, tree, i)? {
            field[idx] = v;
        }
    }
    for level in (0..tree.depth).rev() {
        let t = tree.time(level);
        for up in 0..=level {
            let node = TreeNode { level, up };
            let idx = tree.index(node);
            let mut base = Vec::with_capacity(ell);
            let mut y = Vec::with_capacity(ell);
            for i in 0..ell {
                let (e, z) = expectation_and_z(&p[i], tree, node);
                let c = &coeffs[i][idx];
                let drift = &drift_pi(c, &e, &z)? + &c.q.scale(tilde.factor(i, t));
                base.push(e.axpy(dt, &drift));
                y.push(e);
                lam[i][idx] = z;
            }
            let mut converged = false;
            let mut history = Vec::new();
            for _ in 0..COUPLING_MAX_ITER {
                let next: Vec<SymMatrix> = (0..ell)
                    .map(|i| {
                        (0..ell).filter(|&j| j != i).fold(base[i].clone(), |acc, j| {
                            acc.axpy(dt * spec.generator.coupling_weight(i, j, t), &y[j])
                        })
                    })
                    .collect();
                let change = next
                    .iter()
                    .zip(&y)
                    .map(|(a, b)| (a - b).frobenius_norm())
                    .fold(0.0_f64, f64::max);
                let scale = next.iter().map(|v| v.frobenius_norm()).fold(1.0_f64, f64::max);
                y = next;
                history.push(change);
                if change <= COUPLING_TOL * scale {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::NoConvergence {
                    stage: "regime coupling at a tree node",
                    iterations: COUPLING_MAX_ITER,
                    last: history.last().copied().unwrap_or(f64::NAN),
                    residual_history: history,
                });
            }
            for (i, v) in y.into_iter().enumerate() {
                p[i][idx] = guard_psd(v, opts.psd_tol, t, i)?;
            }
        }
    }
    Ok((p, lam))
}

/// One decoupled sweep per regime with the coupling frozen at `prev`.
pub(crate) fn picard_step(
    spec: &ProblemSpec,
    prev: &TildeField,
    tree: &BinomialTree,
    opts: &EsreOptions,
) -> Result<(TildeField, TildeField)> {
    let tilde = tilde_transform(spec);
    let coeffs = node_coeffs(spec, tree)?;
    let dt = tree.dt();
    let zero = SymMatrix::zeros(spec.n);
    let per_regime: Vec<(Vec<SymMatrix>, Vec<SymMatrix>)> = (0..spec.ell())
        .into_par_iter()
        .map(|i| {
            let mut p = vec![zero.clone(); tree.node_count()];
            let mut lam = p.clone();
            for (idx, v) in terminal_values(spec, tree, i)? {
                p[idx] = v;
            }
            for level in (0..tree.depth).rev() {
                let t = tree.time(level);
                for up in 0..=level {
                    let node = TreeNode { level, up };
                    let idx = tree.index(node);
                    let (e, z) = expectation_and_z(&p, tree, node);
                    let mut source = zero.clone();
                    for (j, field) in prev.iter().enumerate() {
                        if j != i {
                            source = source.axpy(spec.generator.coupling_weight(i, j, t), &field[idx]);
                        }
                    }
                    let c = coeffs[i][idx].tilde(tilde.factor(i, t));
                    let f = regime_rhs(&c, &e, &z, &source, opts)?;
                    p[idx] = guard_psd(e.axpy(dt, &f), opts.psd_tol, t, i)?;
                    lam[idx] = z;
                }
            }
            Ok((p, lam))
        })
        .collect::<Result<_>>()?;
    Ok(per_regime.into_iter().unzip())
}
