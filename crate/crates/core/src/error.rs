use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix asymmetry {max_asym:e} exceeds tolerance {tol:e}")]
    AsymmetryExceeded { max_asym: f64, tol: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is near-singular (condition number {cond:e}, threshold {threshold:e})")]
    NearSingular { cond: f64, threshold: f64 },

    #[error("structural error: {0}")]
    StructuralError(String),

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("generator entry ({row},{col}) = {value} is a negative off-diagonal rate")]
    NegativeOffDiagonal { row: usize, col: usize, value: f64 },

    #[error("generator row {row} sums to {sum:e}, expected 0")]
    RowSumNonzero { row: usize, sum: f64 },

    #[error("at least two regimes are required, got {0}")]
    TooFewRegimes(usize),

    #[error("{stage} did not converge after {iterations} iterations (last residual {last:e})")]
    NoConvergence {
        stage: &'static str,
        iterations: usize,
        last: f64,
        residual_history: Vec<f64>,
    },

    #[error("eigenvalue {min_eigenvalue:e} below -{tol:e} at t = {time}, regime {regime}")]
    PsdViolation {
        min_eigenvalue: f64,
        tol: f64,
        time: f64,
        regime: usize,
    },

    #[error("integration blew up at t = {time} (norm {norm:e})")]
    StepFailure { time: f64, norm: f64 },

    #[error("forward state is singular at level {level} (|det| = {det:e})")]
    SingularState { level: usize, det: f64 },

    #[error("path {path} blew up at t = {time} (|X| = {norm:e})")]
    BlowUp { path: usize, time: f64, norm: f64 },

    #[error("standing assumptions violated: {0}")]
    AssumptionsViolated(String),
}
