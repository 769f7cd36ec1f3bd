mod common;

use common::{example1, example2, invertible_b_system, system};
use lossylqr_core::numerics::lambda_min;
use lossylqr_core::riccati::RESIDUAL_TOL;
use lossylqr_core::{critical_probability, mare_solve, Error, QcMethod, SymMatrix};
use proptest::prelude::*;

fn loewner_gap(lo: &SymMatrix, hi: &SymMatrix) -> f64 {
    lambda_min(&SymMatrix::symmetrize(hi.as_matrix() - lo.as_matrix())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solution_is_fixed_point_and_monotone(sys in system(4), f1 in 0.0f64..0.9, f2 in 0.0f64..0.9) {
        let qc = critical_probability(&sys).unwrap().lower;
        let (lo, hi) = if f1 <= f2 { (f1 * qc, f2 * qc) } else { (f2 * qc, f1 * qc) };
        let p_lo = mare_solve(&sys, lo).unwrap();
        let p_hi = mare_solve(&sys, hi).unwrap();
        prop_assert!(p_lo.residual <= RESIDUAL_TOL);
        prop_assert!(p_hi.residual <= RESIDUAL_TOL);
        prop_assert!(lambda_min(&p_lo.p).unwrap() > 0.0);
        let tol = 1e-8 * (1.0 + p_hi.p.frobenius_norm());
        prop_assert!(loewner_gap(&p_lo.p, &p_hi.p) >= -tol);
    }

    #[test]
    fn solution_is_continuous(sys in system(3), f in 0.0f64..0.8) {
        let q = f * critical_probability(&sys).unwrap().lower;
        let p = mare_solve(&sys, q).unwrap().p;
        let p_eps = mare_solve(&sys, q + 1e-7).unwrap().p;
        prop_assert!((p_eps.as_matrix() - p.as_matrix()).norm() <= 1e-3 * (1.0 + p.frobenius_norm()));
    }

    #[test]
    fn invertible_b_threshold_is_sharp(sys in invertible_b_system(3)) {
        let qc = critical_probability(&sys).unwrap();
        prop_assert_eq!(qc.method, QcMethod::InvertibleB);
        let exact = qc.exact.unwrap();
        prop_assume!(exact * (1.0 + 1e-2) < 1.0 && exact > 0.02);
        prop_assert!(mare_solve(&sys, exact * (1.0 - 1e-3)).is_ok());
        let over = mare_solve(&sys, exact * (1.0 + 1e-2));
        prop_assert!(matches!(over, Err(Error::NoSolution { .. })), "{:?}", over);
    }
}

#[test]
fn examples_have_closed_form_thresholds() {
    let qc1 = critical_probability(&example1()).unwrap();
    assert!((qc1.exact.unwrap() - 1.0 / 2.25).abs() < 1e-12);
    let qc2 = critical_probability(&example2()).unwrap();
    assert_eq!(qc2.method, QcMethod::InvertibleB);
    assert!((qc2.exact.unwrap() - 1.0 / 2.25).abs() < 1e-12);
}
