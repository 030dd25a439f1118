//! Linear-quadratic control of diffusions whose coefficients switch with a
//! continuous-time Markov chain: Riccati solver, feedback synthesis and
//! Monte Carlo verification.

pub mod control;
pub mod error;
pub mod esre;
pub mod fbsde_check;
pub mod lattice;
pub mod matcore;
pub mod model;
pub mod regime_chain;
pub mod samples;

pub use error::{Error, Result};
