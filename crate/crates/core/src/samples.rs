//! Reference problems used by the test suites and the CLI examples.

use crate::matcore::Mat;
use crate::model::{CoefficientField, ProblemSpec};
use crate::regime_chain::{validate_generator, Generator};
use rand::Rng;

fn s(v: f64) -> Mat {
    Mat::from_element(1, 1, v)
}

pub fn symmetric_generator(rate: f64) -> Generator {
    validate_generator(&Mat::from_row_slice(2, 2, &[-rate, rate, rate, -rate])).expect("valid generator")
}

/// Two symmetric regimes, scalar state and control, `B = R = G = 1`, all
/// other coefficients zero, unit switching rate, `T = 1`. Closed form
/// `P(t) = 1/(1 + T − t)`.
pub fn e1() -> ProblemSpec {
    ProblemSpec::builder(1, 1, symmetric_generator(1.0), 1.0)
        .b(CoefficientField::uniform(2, s(1.0)))
        .g(CoefficientField::uniform(2, s(1.0)))
        .build()
        .expect("valid problem")
}

/// `E1` with a unit state cost in the first regime only.
pub fn asymmetric_scalar() -> ProblemSpec {
    ProblemSpec::builder(1, 1, symmetric_generator(1.0), 1.0)
        .b(CoefficientField::uniform(2, s(1.0)))
        .q(CoefficientField::Constant(vec![s(1.0), s(0.0)]))
        .g(CoefficientField::uniform(2, s(1.0)))
        .build()
        .expect("valid problem")
}

/// Closed-form value of `E1`.
pub fn e1_value(t: f64) -> f64 {
    1.0 / (2.0 - t)
}

#[derive(Clone, Copy, Debug)]
pub struct RandomSpecOptions {
    pub max_n: usize,
    pub max_m: usize,
    pub max_ell: usize,
    /// Scale of the entries of `D`; zero gives `D ≡ 0`.
    pub d_scale: f64,
    /// Use piecewise-constant time tables instead of constants.
    pub time_tables: bool,
}

impl Default for RandomSpecOptions {
    fn default() -> Self {
        RandomSpecOptions {
            max_n: 3,
            max_m: 2,
            max_ell: 3,
            d_scale: 0.2,
            time_tables: false,
        }
    }
}

/// A random problem satisfying the positivity assumptions by construction:
/// `R = δI + LLᵀ`, `Q = SᵀR⁻¹S + MMᵀ`, `G = NNᵀ`.
pub fn random_spec<R: Rng + ?Sized>(rng: &mut R, opts: &RandomSpecOptions) -> ProblemSpec {
    let n = rng.random_range(1..=opts.max_n);
    let m = rng.random_range(1..=opts.max_m);
    let ell = rng.random_range(2..=opts.max_ell);
    let horizon = rng.random_range(0.5..1.0);
    let delta = 0.5;
    let mut q = Mat::zeros(ell, ell);
    for i in 0..ell {
        for j in 0..ell {
            if i != j {
                q[(i, j)] = rng.random_range(0.2..1.0);
            }
        }
        let row: f64 = (0..ell).filter(|&j| j != i).map(|j| q[(i, j)]).sum();
        q[(i, i)] = -row;
    }
    let generator = validate_generator(&q).expect("valid generator");
    let breakpoints: Vec<f64> = if opts.time_tables {
        vec![0.0, 0.25 * horizon, 0.5 * horizon]
    } else {
        vec![0.0]
    };
    let mut mat = |r: usize, c: usize, scale: f64| Mat::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0));
    let field = |gen: &mut dyn FnMut() -> Mat| -> CoefficientField {
        if opts.time_tables {
            CoefficientField::TimeTable(
                (0..ell)
                    .map(|_| breakpoints.iter().map(|&t| (t, gen())).collect())
                    .collect(),
            )
        } else {
            CoefficientField::Constant((0..ell).map(|_| gen()).collect())
        }
    };
    let a = field(&mut || mat(n, n, 0.5));
    let b = field(&mut || mat(n, m, 1.0));
    let c = field(&mut || mat(n, n, 0.3));
    let d = field(&mut || mat(n, m, opts.d_scale));
    // R, S and Q share a draw so that the Schur complement stays PSD
    let mut rsq = || {
        let l = mat(m, m, 0.5);
        let r = Mat::identity(m, m) * delta + &l * l.transpose();
        let s = mat(m, n, 0.3);
        let mm = mat(n, n, 0.5);
        let r_inv = r.clone().try_inverse().expect("positive definite");
        let q = s.transpose() * r_inv * &s + &mm * mm.transpose();
        (r, s, q)
    };
    let draws: Vec<Vec<(Mat, Mat, Mat)>> = (0..ell)
        .map(|_| breakpoints.iter().map(|_| rsq()).collect())
        .collect();
    let pick = |sel: fn(&(Mat, Mat, Mat)) -> Mat| -> CoefficientField {
        if opts.time_tables {
            CoefficientField::TimeTable(
                draws
                    .iter()
                    .map(|regime| regime.iter().zip(&breakpoints).map(|(d, &t)| (t, sel(d))).collect())
                    .collect(),
            )
        } else {
            CoefficientField::Constant(draws.iter().map(|regime| sel(&regime[0])).collect())
        }
    };
    let r = pick(|d| d.0.clone());
    let s_field = pick(|d| d.1.clone());
    let q_field = pick(|d| d.2.clone());
    let g = CoefficientField::Constant(
        (0..ell)
            .map(|_| {
                let nn = mat(n, n, 0.7);
                &nn * nn.transpose()
            })
            .collect(),
    );
    ProblemSpec::builder(n, m, generator, horizon)
        .a(a)
        .b(b)
        .c(c)
        .d(d)
        .q(q_field)
        .s(s_field)
        .r(r)
        .g(g)
        .delta(delta)
        .asym_tol(1e-8)
        .build()
        .expect("valid problem")
}
