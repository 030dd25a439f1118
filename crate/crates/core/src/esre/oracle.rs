//! Reference solution: the full coupled system in the original coordinates,
//! integrated for all regimes at once without any Picard splitting.

use super::ode::{interval_coeffs, rk4_backward, stage_time};
use super::riccati::{drift_h, drift_pi};
use super::{diagnostics, Backend, EsreOptions, EsreSolution};
use crate::error::{Error, Result};
use crate::lattice::{Lattice, TimeGrid};
use crate::matcore::SymMatrix;
use crate::model::ProblemSpec;

const BLOW_UP: f64 = 1e8;

pub fn direct_coupled_oracle(spec: &ProblemSpec, grid: &TimeGrid, opts: &EsreOptions) -> Result<EsreSolution> {
    if !spec.is_deterministic() {
        return Err(Error::StructuralError(
            "the coupled oracle needs deterministic coefficients".into(),
        ));
    }
    let ell = spec.ell();
    let coeffs = interval_coeffs(spec, grid)?;
    let dt = grid.dt();
    let zero = SymMatrix::zeros(spec.n);
    let mut p = vec![vec![zero.clone(); grid.len()]; ell];
    let mut y: Vec<SymMatrix> = (0..ell).map(|i| spec.terminal(i, None)).collect::<Result<_>>()?;
    for (i, v) in y.iter().enumerate() {
        p[i][grid.steps] = v.clone();
    }
    for k in (0..grid.steps).rev() {
        let (t_lo, t_hi) = (grid.time(k), grid.time(k + 1));
        y = rk4_backward(&y, dt, |stage, state| {
            let t = stage_time(stage, t_lo, t_hi);
            if let Some(norm) = state.iter().map(|s| s.frobenius_norm()).find(|v| !(*v <= BLOW_UP)) {
                return Err(Error::StepFailure { time: t, norm });
            }
            (0..ell)
                .map(|i| {
                    let c = &coeffs[i][k];
                    let mut f = &(&drift_pi(c, &state[i], &zero)? + &c.q)
                        + &drift_h(c, &state[i], &zero, opts.cond_threshold)?;
                    for (j, other) in state.iter().enumerate() {
                        f = f.axpy(spec.generator.rate(i, j), other);
                    }
                    Ok(f)
                })
                .collect()
        })?;
        if let Some(norm) = y.iter().map(|s| s.frobenius_norm()).find(|v| !(*v <= BLOW_UP)) {
            return Err(Error::StepFailure { time: t_lo, norm });
        }
        for (i, v) in y.iter().enumerate() {
            p[i][k] = v.clone();
        }
    }
    let lattice = Lattice::Grid(*grid);
    let diag = diagnostics(spec, &lattice, opts)?;
    Ok(EsreSolution {
        lambda: vec![vec![zero; grid.len()]; ell],
        p,
        lattice,
        backend: Backend::Ode,
        iterations: 0,
        residual_history: Vec::new(),
        diagnostics: diag,
        iterates: None,
    })
}
