//! Pointwise Riccati functionals. All take the coefficients of one regime at
//! one time; pass tilde-scaled coefficients (`NodeCoeffs::tilde`) to work in
//! tilde coordinates.

use crate::error::{Error, Result};
use crate::matcore::{sym_inverse, Mat, SymMatrix};
use crate::model::NodeCoeffs;

fn check_dims(c: &NodeCoeffs, p: &SymMatrix, lam: &SymMatrix) -> Result<()> {
    let n = c.a.nrows();
    if p.dim() != n || lam.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "P is {0}x{0} and Lambda {1}x{1}, state dimension is {n}",
            p.dim(),
            lam.dim()
        )));
    }
    Ok(())
}

/// `PA + AᵀP + CᵀPC + ΛC + CᵀΛ`
pub fn drift_pi(c: &NodeCoeffs, p: &SymMatrix, lam: &SymMatrix) -> Result<SymMatrix> {
    check_dims(c, p, lam)?;
    let pm = p.as_mat();
    let lc = lam.as_mat() * &c.c;
    let pa = pm * &c.a;
    let raw = &pa + pa.transpose() + c.c.transpose() * pm * &c.c + &lc + lc.transpose();
    Ok(SymMatrix::symmetric_part(&raw))
}

/// `BᵀP + DᵀPC + DᵀΛ + S` (m×n).
pub fn gain_numerator(c: &NodeCoeffs, p: &SymMatrix, lam: &SymMatrix) -> Mat {
    let dt = c.d.transpose();
    c.b.transpose() * p.as_mat() + &dt * p.as_mat() * &c.c + &dt * lam.as_mat() + &c.s
}

/// `R + DᵀPD`
pub fn control_hessian(c: &NodeCoeffs, p: &SymMatrix) -> SymMatrix {
    &c.r + &p.congruence(&c.d)
}

/// `−(PB + CᵀPD + ΛD + Sᵀ)(R + DᵀPD)⁻¹(BᵀP + DᵀPC + DᵀΛ + S)`
pub fn drift_h(c: &NodeCoeffs, p: &SymMatrix, lam: &SymMatrix, cond: f64) -> Result<SymMatrix> {
    check_dims(c, p, lam)?;
    let inv = sym_inverse(&control_hessian(c, p), cond)?;
    Ok(-&inv.congruence(&gain_numerator(c, p, lam)))
}

/// The same term when `D ≡ 0`: `−(PB + Sᵀ)R⁻¹(BᵀP + S)`.
pub fn drift_h_no_control_noise(c: &NodeCoeffs, p: &SymMatrix, cond: f64) -> Result<SymMatrix> {
    let inv = sym_inverse(&c.r, cond)?;
    let num = c.b.transpose() * p.as_mat() + &c.s;
    Ok(-&inv.congruence(&num))
}

/// Minimiser of `F(·)`: `−(R + DᵀPD)⁻¹(BᵀP + DᵀPC + DᵀΛ + S)`.
pub fn theta_hat(c: &NodeCoeffs, p: &SymMatrix, lam: &SymMatrix, cond: f64) -> Result<Mat> {
    check_dims(c, p, lam)?;
    let inv = sym_inverse(&control_hessian(c, p), cond)?;
    Ok(-(inv.as_mat() * gain_numerator(c, p, lam)))
}

fn check_theta(c: &NodeCoeffs, theta: &Mat) -> Result<()> {
    if theta.nrows() != c.b.ncols() || theta.ncols() != c.a.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "theta is {}x{}, expected {}x{}",
            theta.nrows(),
            theta.ncols(),
            c.b.ncols(),
            c.a.nrows()
        )));
    }
    Ok(())
}

/// `(A+Bθ)ᵀP + P(A+Bθ) + (C+Dθ)ᵀΛ + Λ(C+Dθ) + (C+Dθ)ᵀP(C+Dθ)`
pub fn g_of_theta(c: &NodeCoeffs, p: &SymMatrix, lam: &SymMatrix, theta: &Mat) -> Result<SymMatrix> {
    check_dims(c, p, lam)?;
    check_theta(c, theta)?;
    let ak = &c.a + &c.b * theta;
    let ck = &c.c + &c.d * theta;
    let pa = p.as_mat() * &ak;
    let lc = lam.as_mat() * &ck;
    let raw = &pa + pa.transpose() + &lc + lc.transpose() + ck.transpose() * p.as_mat() * &ck;
    Ok(SymMatrix::symmetric_part(&raw))
}

/// `G(θ) + θᵀS + Sᵀθ + θᵀRθ + Q`
pub fn f_of_theta(c: &NodeCoeffs, p: &SymMatrix, lam: &SymMatrix, theta: &Mat) -> Result<SymMatrix> {
    let g = g_of_theta(c, p, lam, theta)?;
    let ts = theta.transpose() * &c.s;
    let raw = g.as_mat() + &ts + ts.transpose() + c.r.congruence(theta).as_mat() + c.q.as_mat();
    Ok(SymMatrix::symmetric_part(&raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::loewner_leq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(a: f64, b: f64, c: f64, d: f64, q: f64, s: f64, r: f64) -> NodeCoeffs {
        let m = |v| Mat::from_element(1, 1, v);
        NodeCoeffs {
            a: m(a),
            b: m(b),
            c: m(c),
            d: m(d),
            q: SymMatrix::scalar(q),
            s: m(s),
            r: SymMatrix::scalar(r),
        }
    }

    fn sc(v: f64) -> SymMatrix {
        SymMatrix::scalar(v)
    }

    fn random_coeffs(rng: &mut ChaCha8Rng, n: usize, m: usize) -> NodeCoeffs {
        let mut mat = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0));
        let l = mat(m, m);
        let qm = mat(n, n);
        NodeCoeffs {
            a: mat(n, n),
            b: mat(n, m),
            c: mat(n, n),
            d: mat(n, m),
            s: mat(m, n),
            q: SymMatrix::symmetric_part(&(&qm * qm.transpose())),
            r: SymMatrix::symmetric_part(&(&l * l.transpose() + Mat::identity(m, m))),
        }
    }

    fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
        let m = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::symmetric_part(&(&m * m.transpose()))
    }

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> SymMatrix {
        SymMatrix::symmetric_part(&Mat::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5)))
    }

    #[test]
    fn pi_examples() {
        let c = scalar(1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(drift_pi(&c, &sc(2.0), &sc(0.5)).unwrap().get(0, 0), 7.0);
        let zero = scalar(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(drift_pi(&zero, &sc(3.0), &sc(-1.0)).unwrap().get(0, 0), 0.0);
        let lyap = scalar(-0.7, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((drift_pi(&lyap, &sc(2.0), &sc(0.0)).unwrap().get(0, 0) + 2.8).abs() < 1e-15);
        assert!(matches!(
            drift_pi(&c, &SymMatrix::identity(2), &sc(0.0)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn h_examples() {
        let c = scalar(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(drift_h(&c, &sc(1.0), &sc(0.0), 1e12).unwrap().get(0, 0), -1.0);
        let no_b = scalar(0.3, 0.0, 0.2, 0.0, 0.0, 0.0, 1.0);
        assert_eq!(drift_h(&no_b, &sc(4.0), &sc(1.0), 1e12).unwrap().get(0, 0), 0.0);
        let singular = scalar(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert!(matches!(
            drift_h(&singular, &sc(1.0), &sc(0.0), 1e12),
            Err(Error::NearSingular { .. })
        ));
    }

    #[test]
    fn theta_examples() {
        let c = scalar(0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 2.0);
        assert_eq!(theta_hat(&c, &sc(1.0), &sc(0.0), 1e12).unwrap()[(0, 0)], -1.5);
        assert_eq!(theta_hat(&c, &sc(0.0), &sc(0.0), 1e12).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn f_examples() {
        let c = scalar(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let f = f_of_theta(&c, &sc(1.0), &sc(0.0), &Mat::from_element(1, 1, -1.0)).unwrap();
        assert_eq!(f.get(0, 0), -1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = random_coeffs(&mut rng, 3, 2);
        let p = random_psd(&mut rng, 3);
        let lam = random_sym(&mut rng, 3);
        let f0 = f_of_theta(&c, &p, &lam, &Mat::zeros(2, 3)).unwrap();
        let pi_q = &drift_pi(&c, &p, &lam).unwrap() + &c.q;
        assert!((&f0 - &pi_q).max_abs() < 1e-13);
    }

    #[test]
    fn minimiser_dominates_random_thetas() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let c = random_coeffs(&mut rng, 3, 2);
        let p = random_psd(&mut rng, 3);
        let lam = random_sym(&mut rng, 3);
        let th = theta_hat(&c, &p, &lam, 1e12).unwrap();
        let best = f_of_theta(&c, &p, &lam, &th).unwrap();
        for _ in 0..100 {
            let theta = Mat::from_fn(2, 3, |_, _| rng.random_range(-3.0..3.0));
            let other = f_of_theta(&c, &p, &lam, &theta).unwrap();
            assert!(loewner_leq(&best, &other, 1e-9).unwrap());
        }
        // the minimum value is Π + Q + H
        let expected = &(&drift_pi(&c, &p, &lam).unwrap() + &c.q) + &drift_h(&c, &p, &lam, 1e12).unwrap();
        assert!((&best - &expected).max_abs() < 1e-10);
    }

    #[test]
    fn no_control_noise_form_matches_general() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut c = random_coeffs(&mut rng, 2, 2);
        c.d = Mat::zeros(2, 2);
        let p = random_psd(&mut rng, 2);
        let lam = random_sym(&mut rng, 2);
        let general = drift_h(&c, &p, &lam, 1e12).unwrap();
        let special = drift_h_no_control_noise(&c, &p, 1e12).unwrap();
        assert!((&general - &special).max_abs() <= 1e-12);
    }

    proptest! {
        #[test]
        fn h_is_negative_semidefinite(seed in any::<u64>(), n in 1usize..4, m in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_coeffs(&mut rng, n, m);
            let p = random_psd(&mut rng, n);
            let lam = random_sym(&mut rng, n);
            let h = drift_h(&c, &p, &lam, 1e12).unwrap();
            prop_assert!(h.max_eigenvalue() <= 1e-10);
        }

        #[test]
        fn h_is_minus_theta_quadratic(seed in any::<u64>(), n in 1usize..4, m in 1usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_coeffs(&mut rng, n, m);
            let p = random_psd(&mut rng, n);
            let lam = random_sym(&mut rng, n);
            let h = drift_h(&c, &p, &lam, 1e12).unwrap();
            let th = theta_hat(&c, &p, &lam, 1e12).unwrap();
            // independent expansion: θᵀΣθ with Σ = R + DᵀPD written out
            let sigma = c.r.as_mat() + c.d.transpose() * p.as_mat() * &c.d;
            let quad = th.transpose() * sigma * &th;
            let scale = quad.norm().max(1.0);
            prop_assert!((h.as_mat() + quad).norm() <= 1e-10 * scale);
        }
    }
}
