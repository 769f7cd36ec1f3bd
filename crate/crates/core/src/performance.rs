//! Cost of using the CE gain designed at `q̂` when the true loss rate is `q`.
//!
//! The closed-loop second moment `Σₜ = E[xₜ xₜ^T]` evolves as
//!
//! ```text
//! Σₜ₊₁ = (1 - q)(A + B K̂) Σₜ (A + B K̂)^T + q A Σₜ A^T
//! ```
//!
//! whose vectorization is the lifted map Φ. The Gramian `S = Σₜ Σₜ` gives
//!
//! ```text
//! J_ce - J* = (q - q̂) tr(W S) + tr((P̂ - P) X₀)
//! ```
//!
//! with `W = A^T P̂ B (R + B^T P̂ B)^{-1} B^T P̂ A`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{lambda_max, unvec, vec_of, SymMatrix};
use crate::riccati::{mare_solve, optimal_cost, Gain, SystemSpec};
use crate::stability::{exact_ms_stable, lifted_matrix, CeDesign};

/// Relative agreement required between the linear-solve and series Gramians,
/// scaled by `1 / (1 - ρ(Φ))`.
pub const SERIES_AGREEMENT: f64 = 1e-8;
/// Iterative-refinement passes after the LU solve.
pub const REFINEMENT_STEPS: usize = 2;
/// The series stops once an increment is below this fraction of the running sum.
pub const SERIES_TOL: f64 = 1e-12;
/// Term cap for the series self-check.
pub const SERIES_MAX_TERMS: usize = 1_000_000;

/// `S = Σ_{t>=0} E[xₜ xₜ^T]` from `vec(S) = (I - Φ)^{-1} vec(X₀)`.
///
/// The truncated series `Σ Φᵗ vec(X₀)` runs as a self-check whenever it
/// settles within [`SERIES_MAX_TERMS`]; disagreement beyond
/// [`SERIES_AGREEMENT`]` / (1 - ρ)` is reported as a numerical failure.
pub fn second_moment_sum(sys: &SystemSpec, gain: &Gain, q: f64, x0: &SymMatrix) -> Result<SymMatrix> {
    if x0.dim() != sys.n() {
        return Err(Error::Dimension(format!(
            "initial covariance must be {n}x{n}",
            n = sys.n()
        )));
    }
    let verdict = exact_ms_stable(sys, gain, q)?;
    if !verdict.stable {
        return Err(Error::Unstable {
            rho: verdict.certificate,
        });
    }
    let phi = lifted_matrix(sys, gain, q)?;
    let dim = phi.nrows();
    let lu = (DMatrix::identity(dim, dim) - &phi).lu();
    let solve = |rhs: &DMatrix<f64>| {
        lu.solve(&vec_of(rhs))
            .map(|v| unvec(&v, sys.n()))
            .ok_or_else(|| Error::NumericalFailure("I - Φ is singular".into()))
    };
    // Φ can be far from normal, so refine against the residual of the
    // matrix-form recursion, which is cheaper and more accurate than Φ·vec.
    let closed = sys.a() + sys.b() * &gain.k;
    let step = |m: &DMatrix<f64>| {
        m - ((&closed * m * closed.transpose()) * (1.0 - q) + (sys.a() * m * sys.a().transpose()) * q)
    };
    let mut solved = solve(x0.as_matrix())?;
    for _ in 0..REFINEMENT_STEPS {
        let residual = x0.as_matrix() - step(&solved);
        solved += solve(&residual)?;
    }
    let s = SymMatrix::symmetrize(solved);

    if let Some(series) = second_moment_series(sys, gain, q, x0, SERIES_MAX_TERMS) {
        let diff = (series.as_matrix() - s.as_matrix()).norm();
        // Both the solve and the series tail lose accuracy like 1 / (1 - ρ).
        let conditioning = 1.0 / (1.0 - verdict.certificate).min(1.0);
        if diff > SERIES_AGREEMENT * conditioning * s.frobenius_norm() {
            return Err(Error::NumericalFailure(format!(
                "Gramian linear solve and series disagree by {diff:e}"
            )));
        }
    }
    Ok(s)
}

/// Truncated series for the Gramian, iterating the second-moment recursion
/// directly. Returns `None` if it has not settled after `max_terms` terms.
pub fn second_moment_series(
    sys: &SystemSpec,
    gain: &Gain,
    q: f64,
    x0: &SymMatrix,
    max_terms: usize,
) -> Option<SymMatrix> {
    let closed = sys.a() + sys.b() * &gain.k;
    let a = sys.a();
    let mut sigma = x0.as_matrix().clone();
    let mut sum = sigma.clone();
    for _ in 0..max_terms {
        sigma = (&closed * &sigma * closed.transpose()) * (1.0 - q) + (a * &sigma * a.transpose()) * q;
        sum += &sigma;
        let inc = sigma.norm();
        if !inc.is_finite() {
            return None;
        }
        if inc <= SERIES_TOL * sum.norm() || inc == 0.0 {
            return Some(SymMatrix::symmetrize(sum));
        }
    }
    None
}

/// Analytic optimality gap of the CE gain.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    pub q: f64,
    pub q_hat: f64,
    /// Closed-loop cost of the CE gain, `tr((q - q̂) W S + P̂ X₀)`.
    pub j_ce: f64,
    /// Optimal cost `tr(P X₀)`.
    pub j_star: f64,
    pub gap: f64,
    /// `(q - q̂) tr(W S)`
    pub x_k_term: f64,
    /// `tr((P̂ - P) X₀)`
    pub p_diff_term: f64,
    /// `tr(W S)`, the trace of the weighted Gramian.
    pub trace_x_k: f64,
    /// `λmax(P̂ - P)`
    pub p_diff_max_eig: f64,
    /// `tr(X₀)`
    pub trace_x0: f64,
    /// ρ(Φ) of the closed loop at `q`.
    pub rho: f64,
    /// Gramian `S = Σₜ E[xₜ xₜ^T]`.
    pub s: SymMatrix,
    /// Cost computed directly from the Gramian, `tr((Q + (1 - q) K̂^T R K̂) S)`.
    pub j_ce_direct: f64,
}

/// Optimality gap `J(x₀, û) - J*(x₀)` at true rate `q` for the design at `q_hat`.
pub fn gap(sys: &SystemSpec, q: f64, q_hat: f64, x0: &SymMatrix) -> Result<GapReport> {
    let p = mare_solve(sys, q)?.p;
    let design = CeDesign::new(sys, q_hat)?;
    let p_hat = &design.riccati.p;
    let verdict = exact_ms_stable(sys, &design.gain, q)?;
    let s = second_moment_sum(sys, &design.gain, q, x0)?;

    let trace_x_k = (design.w.as_matrix() * s.as_matrix()).trace();
    let x_k_term = (q - q_hat) * trace_x_k;
    let p_diff = SymMatrix::symmetrize(p_hat.as_matrix() - p.as_matrix());
    let p_diff_term = optimal_cost(&p_diff, x0);
    let j_star = optimal_cost(&p, x0);
    let j_ce = x_k_term + optimal_cost(p_hat, x0);
    let stage = sys.q().as_matrix() + design.krk.as_matrix() * (1.0 - q);
    let j_ce_direct = (stage * s.as_matrix()).trace();

    Ok(GapReport {
        q,
        q_hat,
        j_ce,
        j_star,
        gap: x_k_term + p_diff_term,
        x_k_term,
        p_diff_term,
        trace_x_k,
        p_diff_max_eig: lambda_max(&p_diff)?,
        trace_x0: x0.trace(),
        rho: verdict.certificate,
        s,
        j_ce_direct,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GapBoundKind {
    /// `q̂ < q`: `tr(X_K̂)(q - q̂)`, valid because `P̂ ⪯ P`.
    UnderEstimate,
    /// `q̂ > q`: `tr(X₀) λmax(P̂ - P)`.
    OverEstimate,
    /// `q̂ = q`: the gap is zero.
    Exact,
}

/// Simple upper bound on the gap that drops one of the two terms.
pub fn gap_bounds(report: &GapReport) -> (f64, GapBoundKind) {
    if report.q_hat < report.q {
        (report.trace_x_k * (report.q - report.q_hat), GapBoundKind::UnderEstimate)
    } else if report.q_hat > report.q {
        (report.trace_x0 * report.p_diff_max_eig, GapBoundKind::OverEstimate)
    } else {
        (0.0, GapBoundKind::Exact)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum GapStatus {
    Stable { gap: f64, bound: f64 },
    Unstable { rho: f64 },
    NoSolution,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapRow {
    pub q_hat: f64,
    #[serde(flatten)]
    pub status: GapStatus,
}

impl GapRow {
    pub fn gap(&self) -> Option<f64> {
        match self.status {
            GapStatus::Stable { gap, .. } => Some(gap),
            _ => None,
        }
    }
}

/// Gap across a grid of design rates. Unstable or unsolvable rows are
/// flagged rather than treated as errors.
pub fn gap_curve(sys: &SystemSpec, q: f64, x0: &SymMatrix, q_hat_grid: &[f64]) -> Result<Vec<GapRow>> {
    q_hat_grid
        .iter()
        .map(|&q_hat| {
            let status = match gap(sys, q, q_hat, x0) {
                Ok(r) => {
                    let (bound, _) = gap_bounds(&r);
                    GapStatus::Stable { gap: r.gap, bound }
                }
                Err(Error::Unstable { rho }) => GapStatus::Unstable { rho },
                Err(Error::NoSolution { q: failed, .. }) if failed == q_hat => GapStatus::NoSolution,
                Err(e) => return Err(e),
            };
            Ok(GapRow { q_hat, status })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::riccati::ce_gain;
    use nalgebra::{dmatrix, DVector};

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
    fn scalar_gramian() {
        let sys = example1();
        let (gain, _) = ce_gain(&sys, 0.0).unwrap();
        let s = second_moment_sum(&sys, &gain, 0.2, &SymMatrix::identity(1)).unwrap();
        let k = gain.k[(0, 0)];
        let phi = 0.8 * (1.5 + k) * (1.5 + k) + 0.2 * 2.25;
        assert!((phi - 0.586587).abs() < 1e-5);
        assert!((s.scalar() - 1.0 / (1.0 - phi)).abs() < 1e-12);
        assert!((s.scalar() - 2.41889).abs() < 1e-5);
    }

    #[test]
    fn deadbeat_gramian_is_open_loop_series() {
        // A + BK = 0: Σₜ₊₁ = q A Σₜ A^T, so S = Σ qᵗ Aᵗ X₀ (A^T)ᵗ.
        let sys = example2();
        let gain = Gain::new(-sys.a().clone(), 0.0);
        let q = 0.3;
        let x0 = SymMatrix::new(dmatrix![2.0, 0.5; 0.5, 1.0]).unwrap();
        let s = second_moment_sum(&sys, &gain, q, &x0).unwrap();
        let mut term = x0.as_matrix().clone();
        let mut oracle = term.clone();
        for _ in 0..400 {
            term = sys.a() * &term * sys.a().transpose() * q;
            oracle += &term;
        }
        assert!((s.as_matrix() - &oracle).norm() < 1e-10 * oracle.norm());
    }

    #[test]
    fn zero_initial_covariance() {
        let sys = example2();
        let (gain, _) = ce_gain(&sys, 0.1).unwrap();
        let s = second_moment_sum(&sys, &gain, 0.2, &SymMatrix::zeros(2)).unwrap();
        assert_eq!(s.frobenius_norm(), 0.0);
    }

    #[test]
    fn unstable_gramian_is_rejected() {
        let sys = example1();
        let (gain, _) = ce_gain(&sys, 0.0).unwrap();
        assert!(matches!(
            second_moment_sum(&sys, &gain, 0.4, &SymMatrix::identity(1)),
            Err(Error::Unstable { .. })
        ));
    }

    #[test]
    fn scalar_gap_values() {
        let r = gap(&example1(), 0.2, 0.0, &SymMatrix::identity(1)).unwrap();
        assert!((r.gap - 0.20915).abs() < 1e-4, "{}", r.gap);
        assert!((r.j_ce - 4.70452).abs() < 1e-4);
        assert!((r.j_star - 4.49537).abs() < 1e-4);
        assert!((r.j_ce - r.j_star - r.gap).abs() < 1e-9 * r.j_ce);
        assert!((r.j_ce - r.j_ce_direct).abs() < 1e-9 * r.j_ce);

        let (bound, kind) = gap_bounds(&r);
        assert_eq!(kind, GapBoundKind::UnderEstimate);
        assert!((bound - 2.0743).abs() < 1e-3, "{bound}");
    }

    #[test]
    fn matched_design_has_zero_gap() {
        let r = gap(&example2(), 0.2, 0.2, &SymMatrix::identity(2)).unwrap();
        assert_eq!(r.gap, 0.0);
        assert_eq!(gap_bounds(&r), (0.0, GapBoundKind::Exact));
    }

    #[test]
    fn over_estimate_bound_covers_gap() {
        let sys = example1();
        for i in 1..=20 {
            let q_hat = 0.2 + i as f64 * 0.012;
            let r = gap(&sys, 0.2, q_hat, &SymMatrix::identity(1)).unwrap();
            let (bound, kind) = gap_bounds(&r);
            assert_eq!(kind, GapBoundKind::OverEstimate);
            assert!(bound >= r.gap - 1e-9 * (1.0 + r.gap), "q̂={q_hat}");
            assert!(r.gap >= -1e-8 * (1.0 + r.j_star));
        }
    }

    #[test]
    fn curve_flags_unstable_rows() {
        let sys = example1();
        let rows = gap_curve(&sys, 0.4, &SymMatrix::identity(1), &[0.0, 0.4, 0.5]).unwrap();
        assert!(matches!(rows[0].status, GapStatus::Unstable { .. }));
        assert_eq!(rows[1].gap(), Some(0.0));
        assert_eq!(rows[2].status, GapStatus::NoSolution);
    }

    #[test]
    fn example2_curve_shape() {
        let sys = example2();
        let x0 = SymMatrix::outer(&DVector::from_vec(vec![5.0, 5.0]));
        let grid: Vec<f64> = (0..=44).map(|i| i as f64 * 0.01).collect();
        let rows = gap_curve(&sys, 0.2, &x0, &grid).unwrap();
        let gaps: Vec<f64> = rows.iter().map(|r| r.gap().unwrap()).collect();
        let at = |v: f64| gaps[(v / 0.01).round() as usize];
        assert!(at(0.4) > at(0.0));
        assert!(at(0.2).abs() < 1e-12);
    }
}
