//! Loss-rate estimation from channel samples, Hoeffding radii, sample
//! complexity bounds, and the data-driven stability certificate.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{generalized_max_eig, lambda_min, SymMatrix};
use crate::riccati::SystemSpec;
use crate::stability::{st_lower_bound, CeDesign, ThresholdVariant};

/// Bisection tolerance used to cross-check the closed-form `q̄`.
pub const CERTIFICATE_BISECTION_TOL: f64 = 1e-8;

/// Observed delivery indicators `λᵢ` (1 = delivered, 0 = dropped).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChannelSamples {
    bits: Vec<u8>,
}

impl ChannelSamples {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidInput(format!("channel sample {b} is not 0 or 1")));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn drops(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }
}

/// `q̂ = (1/N) Σ (1 - λᵢ)`
pub fn estimate_loss_rate(samples: &ChannelSamples) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("cannot estimate from zero samples".into()));
    }
    Ok(samples.drops() as f64 / samples.len() as f64)
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("confidence level beta = {beta} must lie in (0, 1)")))
    }
}

/// Hoeffding radius `Δ(N, β) = sqrt(log(2/β) / (2N))`.
pub fn hoeffding_delta(n: u64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    Ok(((2.0 / beta).ln() / (2.0 * n as f64)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplexityVariant {
    /// `log(2/β) / (2 δ̄²)` for a supplied threshold δ̄.
    FromThreshold,
    /// `c₁² log(2/β) / (2 λmin{Q^{1/2}(A^T P² A)^{-1} Q^{1/2}}²)`.
    General,
    /// `log(2/β) A⁴B⁴P⁴(R+B²P)² / [Q(R+B²P)² + (1-q)R A²B²P²]²`.
    Scalar,
    /// `log(2/β) / λmin{Ξ (A^T P A)^{-1} Ξ}²`.
    InvertibleB,
}

/// Sufficient sample size for the CE gain to stabilize with probability `1 - β`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub variant: ComplexityVariant,
    pub q: f64,
    pub beta: f64,
    /// Stability-threshold value the bound is built on.
    pub threshold: f64,
    /// Right-hand side of `N_q > bound`; infinite when the threshold is zero.
    pub bound: f64,
    /// `floor(bound) + 1`, or `None` when the bound is infinite.
    pub min_n: Option<u64>,
    /// The tailored scalar and invertible-B formulas are applied as printed,
    /// without the factor 2 in the denominator that the other two carry.
    pub includes_factor_two: bool,
}

impl ComplexityReport {
    pub fn is_infinite(&self) -> bool {
        self.min_n.is_none()
    }
}

/// Sample-complexity bound at true loss rate `q`.
pub fn min_samples(
    sys: &SystemSpec,
    q: f64,
    beta: f64,
    variant: ComplexityVariant,
    delta_bar: Option<f64>,
) -> Result<ComplexityReport> {
    check_beta(beta)?;
    let log_term = (2.0 / beta).ln();
    let (threshold, bound, factor_two) = match variant {
        ComplexityVariant::FromThreshold => {
            let d = delta_bar.ok_or_else(|| {
                Error::InvalidInput("from_threshold needs a stability threshold".into())
            })?;
            if d.is_nan() || d < 0.0 {
                return Err(Error::InvalidInput(format!("threshold {d} must be nonnegative")));
            }
            (d, log_term / (2.0 * d * d), true)
        }
        ComplexityVariant::General => {
            let rep = st_lower_bound(sys, q, ThresholdVariant::General)?;
            let bound = if rep.clamped {
                log_term / (2.0 * rep.bound * rep.bound)
            } else {
                let c1 = rep.constituents["c1"];
                let lmin = rep.constituents["lambda_min_term"];
                c1 * c1 * log_term / (2.0 * lmin * lmin)
            };
            (rep.bound, bound, true)
        }
        ComplexityVariant::Scalar => {
            let rep = st_lower_bound(sys, q, ThresholdVariant::Scalar)?;
            let p = crate::riccati::mare_solve(sys, q)?.p.scalar();
            let (a, b) = (sys.a()[(0, 0)], sys.b()[(0, 0)]);
            let (qq, r) = (sys.q().scalar(), sys.r().scalar());
            let s = r + b * b * p;
            let ab2p2 = a * a * b * b * p * p;
            let num = log_term * ab2p2 * ab2p2 * s * s;
            let den = qq * s * s + (1.0 - q) * r * ab2p2;
            (rep.bound, num / (den * den), false)
        }
        ComplexityVariant::InvertibleB => {
            let rep = st_lower_bound(sys, q, ThresholdVariant::InvertibleB)?;
            (rep.bound, log_term / (rep.bound * rep.bound), false)
        }
    };
    let min_n = (bound.is_finite() && bound < u64::MAX as f64).then(|| bound.floor() as u64 + 1);
    Ok(ComplexityReport {
        variant,
        q,
        beta,
        threshold,
        bound,
        min_n,
        includes_factor_two: factor_two,
    })
}

/// Outcome of the data-driven stability check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub q_hat: f64,
    pub n_q: u64,
    pub beta: f64,
    /// Hoeffding radius `Δ(N_q, β)`.
    pub delta: f64,
    /// Largest loss rate for which the CE gain at `q̂` still satisfies the
    /// Lyapunov condition (open supremum, clamped to `[q̂, 1]`).
    pub q_bar: f64,
    /// `q̄ >= q̂ + Δ`
    pub passed: bool,
}

/// Certifies the CE gain designed at `q_hat` without knowing the true `q`.
///
/// The constraint `C(x) = Q + (1 - x) K̂^T R K̂ - (x - q̂) W ≻ 0` is affine
/// in `x`: `C(x) = C₀ - x C₁` with `C₀ = Q + K̂^T R K̂ + q̂ W ≻ 0` and
/// `C₁ = K̂^T R K̂ + W ⪰ 0`, so the feasible set is `x < 1 / λmax(C₀^{-1/2} C₁ C₀^{-1/2})`.
/// The closed form is cross-checked by bisection on `λmin(C(x)) > 0`.
pub fn certify_ce_controller(sys: &SystemSpec, q_hat: f64, n_q: u64, beta: f64) -> Result<Certificate> {
    let delta = hoeffding_delta(n_q, beta)?;
    let design = CeDesign::new(sys, q_hat)?;
    let q_bar = q_bar_closed_form(sys, &design)?;
    let check = q_bar_bisection(sys, &design)?;
    if (q_bar - check).abs() > 2.0 * CERTIFICATE_BISECTION_TOL {
        return Err(Error::NumericalFailure(format!(
            "closed-form q_bar {q_bar} disagrees with bisection {check}"
        )));
    }
    Ok(Certificate {
        q_hat,
        n_q,
        beta,
        delta,
        q_bar,
        passed: q_bar >= q_hat + delta,
    })
}

fn certificate_pencil(sys: &SystemSpec, design: &CeDesign) -> (SymMatrix, SymMatrix) {
    let c0 = SymMatrix::symmetrize(
        sys.q().as_matrix() + design.krk.as_matrix() + design.w.as_matrix() * design.q_hat(),
    );
    let c1 = SymMatrix::symmetrize(design.krk.as_matrix() + design.w.as_matrix());
    (c0, c1)
}

pub(crate) fn q_bar_closed_form(sys: &SystemSpec, design: &CeDesign) -> Result<f64> {
    let (c0, c1) = certificate_pencil(sys, design);
    let top = generalized_max_eig(&c1, &c0)?;
    let sup = if top > 0.0 { 1.0 / top } else { f64::INFINITY };
    Ok(sup.min(1.0).max(design.q_hat()))
}

fn q_bar_bisection(sys: &SystemSpec, design: &CeDesign) -> Result<f64> {
    let feasible = |x: f64| -> Result<bool> {
        Ok(lambda_min(&design.condition_matrix(sys, x))? > 0.0)
    };
    if feasible(1.0)? {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (design.q_hat(), 1.0);
    while hi - lo > CERTIFICATE_BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, DMatrix};

    fn example1() -> SystemSpec {
        SystemSpec::scalar(1.5, 1.0, 1.0, 1.0).unwrap()
    }

    fn example2() -> SystemSpec {
        SystemSpec::new(
            dmatrix![1.5, 0.1; 0.0, 1.0],
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap()
    }

    #[test]
    fn loss_rate_estimates() {
        let s = ChannelSamples::new(vec![1, 0, 1, 1]).unwrap();
        assert_eq!(estimate_loss_rate(&s).unwrap(), 0.25);
        assert_eq!(estimate_loss_rate(&ChannelSamples::new(vec![1; 7]).unwrap()).unwrap(), 0.0);
        assert_eq!(estimate_loss_rate(&ChannelSamples::new(vec![0; 7]).unwrap()).unwrap(), 1.0);
        assert!(estimate_loss_rate(&ChannelSamples::new(vec![]).unwrap()).is_err());
        assert!(ChannelSamples::new(vec![1, 2]).is_err());
    }

    #[test]
    fn hoeffding_values() {
        assert!((hoeffding_delta(300, 0.01).unwrap() - 0.09397).abs() < 1e-5);
        assert!((hoeffding_delta(450, 0.1).unwrap() - 0.05769).abs() < 1e-5);
        let d = hoeffding_delta(123, 0.2).unwrap();
        let d4 = hoeffding_delta(492, 0.2).unwrap();
        assert!((d / d4 - 2.0).abs() < 1e-12);
        assert!(hoeffding_delta(10, 0.0).is_err());
        assert!(hoeffding_delta(10, 1.0).is_err());
        assert!(hoeffding_delta(0, 0.5).is_err());
    }

    #[test]
    fn complexity_examples() {
        let sys = example1();
        let s = min_samples(&sys, 0.2, 0.1, ComplexityVariant::Scalar, None).unwrap();
        assert!((s.bound - 42.20).abs() < 0.01, "{}", s.bound);
        assert_eq!(s.min_n, Some(43));
        assert!(!s.includes_factor_two);

        let t = min_samples(&sys, 0.2, 0.1, ComplexityVariant::FromThreshold, Some(0.26644)).unwrap();
        assert!((t.bound - 21.10).abs() < 0.01, "{}", t.bound);
        assert_eq!(t.min_n, Some(22));

        let g = min_samples(&sys, 0.2, 0.1, ComplexityVariant::General, None).unwrap();
        assert!((g.bound - 234.98).abs() < 0.01, "{}", g.bound);
        assert_eq!(g.min_n, Some(235));
    }

    #[test]
    fn zero_threshold_is_infinite() {
        let r = min_samples(&example1(), 0.2, 0.1, ComplexityVariant::FromThreshold, Some(0.0)).unwrap();
        assert!(r.is_infinite());
        assert!(r.bound.is_infinite());
        assert!(min_samples(&example1(), 0.2, 0.1, ComplexityVariant::FromThreshold, None).is_err());
    }

    #[test]
    fn scalar_formula_matches_threshold_without_factor_two() {
        let sys = example1();
        for i in 0..40 {
            let q = i as f64 * 0.01;
            let s = min_samples(&sys, q, 0.1, ComplexityVariant::Scalar, None).unwrap();
            let via = (20f64).ln() / (s.threshold * s.threshold);
            assert!((s.bound - via).abs() <= 1e-9 * via, "q={q}");
        }
    }

    #[test]
    fn certificate_example2() {
        let c = certify_ce_controller(&example2(), 0.1633, 300, 0.01).unwrap();
        assert!((c.q_bar - 0.4181).abs() < 2e-3, "{}", c.q_bar);
        assert!((c.delta - 0.0940).abs() < 1e-4);
        assert!(c.passed);
    }

    #[test]
    fn certificate_example1_closed_form() {
        // (Q + R K̂²) / (R K̂² + W) with K̂ = -1.08680 and W = 4.28775.
        let c = certify_ce_controller(&example1(), 0.0, 100, 0.05).unwrap();
        assert!((c.q_bar - 0.39883).abs() < 1e-5, "{}", c.q_bar);
    }

    #[test]
    fn certificate_unconstrained_when_pencil_vanishes() {
        // A = 0 makes K̂ = 0 and W = 0, so every x in [q̂, 1] is feasible.
        let sys = SystemSpec::scalar(0.0, 1.0, 1.0, 1.0).unwrap();
        let c = certify_ce_controller(&sys, 0.3, 50, 0.1).unwrap();
        assert_eq!(c.q_bar, 1.0);
        assert!(c.passed);
    }

    #[test]
    fn certificate_fails_with_few_samples() {
        let c = certify_ce_controller(&example2(), 0.1633, 5, 0.01).unwrap();
        assert!(!c.passed);
        assert!(c.q_bar >= c.q_hat);
    }
}
