//! Continuous-time Markov chain on the regimes `0..ell`.
//!
//! Regimes are zero-based inside the library; the CLI and file formats use
//! one-based labels.

use crate::error::{Error, Result};
use crate::matcore::Mat;
use rand::Rng;
use rand_distr::{Distribution, Exp};

const ROW_SUM_TOL: f64 = 1e-12;

/// A validated generator: non-negative off-diagonal rates, zero row sums.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    q: Mat,
}

/// One realisation of the regime process on `[0, horizon]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimePath {
    /// Strictly increasing, all in `(0, horizon)`.
    pub jump_times: Vec<f64>,
    /// `states[0]` is the initial regime; `states[k]` holds after `jump_times[k-1]`.
    pub states: Vec<usize>,
    pub horizon: f64,
}

pub fn validate_generator(q: &Mat) -> Result<Generator> {
    if !q.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "generator must be square, got {}x{}",
            q.nrows(),
            q.ncols()
        )));
    }
    let ell = q.nrows();
    if ell < 2 {
        return Err(Error::TooFewRegimes(ell));
    }
    for i in 0..ell {
        for j in 0..ell {
            if i != j && q[(i, j)] < 0.0 {
                return Err(Error::NegativeOffDiagonal {
                    row: i,
                    col: j,
                    value: q[(i, j)],
                });
            }
        }
        let sum: f64 = q.row(i).iter().sum();
        if sum.abs() > ROW_SUM_TOL || !sum.is_finite() {
            return Err(Error::RowSumNonzero { row: i, sum });
        }
    }
    Ok(Generator { q: q.clone() })
}

impl Generator {
    pub fn ell(&self) -> usize {
        self.q.nrows()
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.q[(i, j)]
    }

    /// `q_ii` (non-positive).
    pub fn diag(&self, i: usize) -> f64 {
        self.q[(i, i)]
    }

    pub fn matrix(&self) -> &Mat {
        &self.q
    }

    /// `e^{q_ii t}`, the factor of the tilde change of variables.
    pub fn tilde_factor(&self, i: usize, t: f64) -> f64 {
        (self.q[(i, i)] * t).exp()
    }

    /// Weight of regime `j` in the frozen coupling term of regime `i`:
    /// `q_ij e^{(q_ii - q_jj) t}`.
    pub fn coupling_weight(&self, i: usize, j: usize, t: f64) -> f64 {
        self.q[(i, j)] * ((self.q[(i, i)] - self.q[(j, j)]) * t).exp()
    }
}

/// `exp(q t)` by scaling and squaring of a truncated Taylor series.
pub fn transition_matrix(g: &Generator, t: f64) -> Result<Mat> {
    if t < 0.0 || !t.is_finite() {
        return Err(Error::OutOfRange(format!("transition time {t} must be >= 0")));
    }
    let ell = g.ell();
    let a = &g.q * t;
    let norm = (0..ell)
        .map(|i| a.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0_f64, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let b = &a / 2f64.powi(squarings);
    let mut term = Mat::identity(ell, ell);
    let mut sum = term.clone();
    for k in 1..=20 {
        term = &term * &b / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum.apply(|v| *v = v.clamp(0.0, 1.0));
    Ok(sum)
}

/// Exact simulation: exponential holding times with rate `-q_ii`, jumps to
/// `j != i` with probability `q_ij / (-q_ii)`. A state with `q_ii = 0` is absorbing.
pub fn sample_chain_path<R: Rng + ?Sized>(
    g: &Generator,
    i0: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<RegimePath> {
    if i0 >= g.ell() {
        return Err(Error::OutOfRange(format!(
            "initial regime {i0} outside 0..{}",
            g.ell()
        )));
    }
    let mut jump_times = Vec::new();
    let mut states = vec![i0];
    let mut t = 0.0;
    let mut state = i0;
    loop {
        let rate = -g.diag(state);
        if rate <= 0.0 {
            break;
        }
        let hold: f64 = Exp::new(rate).expect("positive rate").sample(rng);
        t += hold;
        if t >= horizon {
            break;
        }
        let mut pick = rng.random::<f64>() * rate;
        let mut next = state;
        for j in 0..g.ell() {
            if j == state {
                continue;
            }
            let r = g.rate(state, j);
            if r <= 0.0 {
                continue;
            }
            next = j;
            if pick < r {
                break;
            }
            pick -= r;
        }
        state = next;
        jump_times.push(t);
        states.push(state);
    }
    Ok(RegimePath {
        jump_times,
        states,
        horizon,
    })
}

impl RegimePath {
    /// Regime in force at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&s| s <= t);
        self.states[k]
    }

    pub fn terminal_state(&self) -> usize {
        *self.states.last().expect("non-empty path")
    }

    /// Checks the structural invariants of a sampled path.
    pub fn is_well_formed(&self) -> bool {
        self.states.len() == self.jump_times.len() + 1
            && self.states.windows(2).all(|w| w[0] != w[1])
            && self.jump_times.windows(2).all(|w| w[0] < w[1])
            && self.jump_times.iter().all(|&s| s > 0.0 && s < self.horizon)
    }
}
