mod common;

use common::{example2, system};
use lossylqr_core::performance::{gap, gap_bounds, gap_curve};
use lossylqr_core::{critical_probability, SymMatrix};
use nalgebra::DVector;
use proptest::prelude::*;

fn x0_of(sys: &lossylqr_core::SystemSpec, seed: &[f64]) -> SymMatrix {
    let x = DVector::from_fn(sys.n(), |i, _| seed[i % seed.len()]);
    SymMatrix::symmetrize(SymMatrix::outer(&x).into_matrix() + nalgebra::DMatrix::identity(sys.n(), sys.n()) * 0.1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gap_decomposes_and_is_bounded(
        sys in system(3),
        f in 0.0f64..0.8,
        g in 0.0f64..0.8,
        seed in prop::collection::vec(-2.0f64..2.0, 1..4),
    ) {
        let qc = critical_probability(&sys).unwrap().lower;
        let (q, q_hat) = (f * qc, g * qc);
        let x0 = x0_of(&sys, &seed);
        let rep = match gap(&sys, q, q_hat, &x0) {
            Ok(r) => r,
            Err(lossylqr_core::Error::Unstable { .. }) => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        let scale = 1e-7 * (1.0 + rep.j_star.abs());
        prop_assert!((rep.gap - (rep.x_k_term + rep.p_diff_term)).abs() <= scale);
        prop_assert!((rep.j_ce - rep.j_ce_direct).abs() <= 1e-6 * (1.0 + rep.j_ce.abs()));
        prop_assert!(rep.gap >= -scale);
        let (bound, _) = gap_bounds(&rep);
        prop_assert!(rep.gap <= bound + scale);
    }

    #[test]
    fn gap_vanishes_continuously(sys in system(3), f in 0.05f64..0.8, eps in 1e-6f64..1e-3) {
        let q = f * critical_probability(&sys).unwrap().lower;
        let x0 = SymMatrix::identity(sys.n());
        let at = gap(&sys, q, q, &x0).unwrap();
        prop_assert!(at.gap.abs() <= 1e-7 * (1.0 + at.j_star));
        let near = gap(&sys, q, q - eps.min(q), &x0).unwrap();
        prop_assert!(near.gap <= 1e-2 * (1.0 + at.j_star));
    }
}

#[test]
fn example2_curve_is_minimized_at_true_rate() {
    let sys = example2();
    let x0 = SymMatrix::outer(&DVector::from_vec(vec![5.0, 5.0]));
    let grid: Vec<f64> = (0..=40).map(|i| i as f64 * 0.01).collect();
    let rows = gap_curve(&sys, 0.2, &x0, &grid).unwrap();
    let gaps: Vec<f64> = rows.iter().map(|r| r.gap().unwrap()).collect();
    let argmin = gaps
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert_eq!(argmin, 20);
    assert!(gaps[..20].windows(2).all(|w| w[0] > w[1]));
    assert!(gaps[20..].windows(2).all(|w| w[0] < w[1]));
}
