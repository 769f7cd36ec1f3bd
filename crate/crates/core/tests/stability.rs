mod common;

use common::{example1, example2, matrix, system};
use lossylqr_core::numerics::kron;
use lossylqr_core::stability::{
    exact_ms_stable, lifted_matrix, lyapunov_stable, region_map, st_lower_bound, CeDesign,
    RegionCriterion, ThresholdVariant,
};
use lossylqr_core::{critical_probability, ce_gain, Gain, SystemSpec};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lifted_map_identity(
        (sys, k) in system(3).prop_flat_map(|s| {
            let (m, n) = (s.m(), s.n());
            (Just(s), matrix(m, n, -2.0, 2.0))
        }),
        q in 0.0f64..1.0,
    ) {
        let gain = Gain::new(k, 0.0);
        let phi = lifted_matrix(&sys, &gain, q).unwrap();
        let cl = sys.a() + sys.b() * &gain.k;
        let other = kron(&cl, &cl) * (1.0 - q) + kron(sys.a(), sys.a()) * q;
        prop_assert!((phi - &other).norm() <= 1e-10 * (1.0 + other.norm()));
    }

    #[test]
    fn overestimating_the_loss_rate_is_safe(sys in system(3), f in 0.0f64..0.9, g in 0.0f64..=1.0) {
        let qc = critical_probability(&sys).unwrap().lower;
        let q_hat = f * qc;
        let q = g * q_hat;
        prop_assert!(lyapunov_stable(&sys, q, q_hat).unwrap().stable);
        let (gain, _) = ce_gain(&sys, q_hat).unwrap();
        prop_assert!(exact_ms_stable(&sys, &gain, q).unwrap().stable);
    }

    #[test]
    fn certified_set_shrinks_with_q(sys in system(3), f in 0.0f64..0.9, g in 0.0f64..1.0, h in 0.0f64..1.0) {
        let qc = critical_probability(&sys).unwrap().lower;
        let q_hat = f * qc;
        let q = q_hat + g * (1.0 - q_hat);
        let inner = q_hat + h * (q - q_hat);
        if lyapunov_stable(&sys, q, q_hat).unwrap().stable {
            prop_assert!(lyapunov_stable(&sys, inner, q_hat).unwrap().stable);
        }
    }

    #[test]
    fn threshold_bounds_are_sound(sys in system(3), f in 0.0f64..0.9, g in 0.0f64..1.0) {
        let qc = critical_probability(&sys).unwrap().lower;
        let q = f * qc;
        let rep = st_lower_bound(&sys, q, ThresholdVariant::General).unwrap();
        prop_assume!(!rep.clamped);
        let q_hat = (q - g * rep.bound).max(0.0);
        let design = CeDesign::new(&sys, q_hat).unwrap();
        prop_assert!(exact_ms_stable(&sys, &design.gain, q).unwrap().stable);
    }
}

#[test]
fn tailored_bounds_dominate_general() {
    let cases: [(SystemSpec, ThresholdVariant); 3] = [
        (example1(), ThresholdVariant::Scalar),
        (example1(), ThresholdVariant::InvertibleB),
        (example2(), ThresholdVariant::InvertibleB),
    ];
    for (sys, variant) in cases {
        for i in 0..44 {
            let q = i as f64 * 0.01;
            let general = st_lower_bound(&sys, q, ThresholdVariant::General).unwrap().bound;
            let tailored = st_lower_bound(&sys, q, variant).unwrap().bound;
            assert!(tailored >= general - 1e-9, "{variant:?} q={q}: {tailored} < {general}");
        }
    }
}

#[test]
fn region_maps_are_sound_on_example2() {
    for criterion in [
        RegionCriterion::Lyapunov,
        RegionCriterion::Threshold(ThresholdVariant::General),
        RegionCriterion::Threshold(ThresholdVariant::InvertibleB),
    ] {
        let map = region_map(&example2(), 0.01, criterion, None).unwrap();
        assert!(map.soundness_violations().is_empty(), "{}", criterion.name());
    }
}
