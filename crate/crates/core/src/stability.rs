//! Mean-square stability tests for the certainty-equivalence closed loop and
//! lower bounds on the stability threshold δ̄(q).
//!
//! With `P̂` the modified Riccati solution at `q̂`, `K̂` its gain, and
//! `W = A^T P̂ B (R + B^T P̂ B)^{-1} B^T P̂ A`, the Lyapunov condition is
//!
//! ```text
//! C(q, q̂) = Q + (1 - q) K̂^T R K̂ - (q - q̂) W ≻ 0
//! ```
//!
//! It is necessary and sufficient in the scalar case and sufficient in
//! general. The exact test is `ρ(Φ) < 1` for the lifted second-moment map
//! `Φ = (1 - q)(A + B K)⊗(A + B K) + q A⊗A`.
//!
//! Strict matrix inequalities are evaluated with a margin of
//! `1e-9 · (1 + ‖Q‖_F)`: a condition holds only when its smallest
//! eigenvalue clears that margin.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{self, generalized_max_eig, kron, lambda_max, lambda_min, psd_sqrt, SymMatrix};
use crate::riccati::{
    critical_probability, dare_solve, mare_solve, riccati_terms, Gain, InputStructure,
    RiccatiSolution, SystemSpec,
};

/// `ρ(Φ)` must be below `1 - EXACT_MARGIN` for the exact test to pass.
pub const EXACT_MARGIN: f64 = 1e-9;

/// Bisection tolerance for the zero-sample fixed point.
pub const FIXED_POINT_TOL: f64 = 1e-6;

/// Margin applied to strict matrix inequalities `M ≻ 0`.
pub fn strict_margin(sys: &SystemSpec) -> f64 {
    1e-9 * (1.0 + sys.q().frobenius_norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    ScalarIff,
    LyapunovSufficient,
    ExactLifted,
}

/// Outcome of a stability test.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityVerdict {
    pub criterion: Criterion,
    /// λmin of the condition matrix, or ρ(Φ) for the exact test.
    pub certificate: f64,
    pub stable: bool,
    pub margin_note: String,
}

/// Everything the CE design at `q̂` contributes to the stability tests.
#[derive(Debug, Clone)]
pub struct CeDesign {
    pub riccati: RiccatiSolution,
    pub gain: Gain,
    /// `A^T P̂ B (R + B^T P̂ B)^{-1} B^T P̂ A`
    pub w: SymMatrix,
    /// `K̂^T R K̂`
    pub krk: SymMatrix,
}

impl CeDesign {
    pub fn new(sys: &SystemSpec, q_hat: f64) -> Result<Self> {
        let riccati = mare_solve(sys, q_hat)?;
        let terms = riccati_terms(sys, riccati.p.as_matrix())?;
        let krk = SymMatrix::symmetrize(terms.gain.transpose() * sys.r().as_matrix() * &terms.gain);
        Ok(Self {
            gain: Gain::new(terms.gain, q_hat),
            w: SymMatrix::symmetrize(terms.w),
            krk,
            riccati,
        })
    }

    pub fn q_hat(&self) -> f64 {
        self.gain.q_design
    }

    /// `C(q, q̂)` for this design at true loss rate `q`.
    pub fn condition_matrix(&self, sys: &SystemSpec, q: f64) -> SymMatrix {
        let m = sys.q().as_matrix() + self.krk.as_matrix() * (1.0 - q)
            - self.w.as_matrix() * (q - self.q_hat());
        SymMatrix::symmetrize(m)
    }
}

/// The Lyapunov condition matrix `C(q, q̂)`.
pub fn condition_matrix(sys: &SystemSpec, q: f64, q_hat: f64) -> Result<SymMatrix> {
    Ok(CeDesign::new(sys, q_hat)?.condition_matrix(sys, q))
}

/// Sufficient test: `C(q, q̂) ≻ 0`.
pub fn lyapunov_stable(sys: &SystemSpec, q: f64, q_hat: f64) -> Result<StabilityVerdict> {
    let design = CeDesign::new(sys, q_hat)?;
    lyapunov_verdict(sys, &design, q)
}

fn lyapunov_verdict(sys: &SystemSpec, design: &CeDesign, q: f64) -> Result<StabilityVerdict> {
    let margin = strict_margin(sys);
    let lmin = lambda_min(&design.condition_matrix(sys, q))?;
    Ok(StabilityVerdict {
        criterion: Criterion::LyapunovSufficient,
        certificate: lmin,
        stable: lmin > margin,
        margin_note: format!("stable iff lambda_min > {margin:e}; sufficient only"),
    })
}

/// Scalar necessary-and-sufficient test:
/// `Q + (1 - q) R K̂² + (q̂ - q) A² B² P̂² / (R + B² P̂) > 0`.
pub fn scalar_iff_stable(sys: &SystemSpec, q: f64, q_hat: f64) -> Result<StabilityVerdict> {
    require_scalar(sys)?;
    let design = CeDesign::new(sys, q_hat)?;
    Ok(scalar_iff_verdict(sys, &design, q))
}

fn scalar_iff_value(sys: &SystemSpec, design: &CeDesign, q: f64) -> f64 {
    let (a, b) = (sys.a()[(0, 0)], sys.b()[(0, 0)]);
    let (qq, r) = (sys.q().scalar(), sys.r().scalar());
    let p = design.riccati.p.scalar();
    let k = design.gain.k[(0, 0)];
    qq + (1.0 - q) * r * k * k + (design.q_hat() - q) * a * a * b * b * p * p / (r + b * b * p)
}

fn scalar_iff_verdict(sys: &SystemSpec, design: &CeDesign, q: f64) -> StabilityVerdict {
    let margin = strict_margin(sys);
    let value = scalar_iff_value(sys, design, q);
    StabilityVerdict {
        criterion: Criterion::ScalarIff,
        certificate: value,
        stable: value > margin,
        margin_note: format!("stable iff value > {margin:e}; necessary and sufficient"),
    }
}

fn require_scalar(sys: &SystemSpec) -> Result<()> {
    if sys.is_scalar() {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "scalar test needs n = m = 1, got n = {}, m = {}",
            sys.n(),
            sys.m()
        )))
    }
}

/// Lifted second-moment map
/// `Φ = [A + (1-q)BK]⊗[A + (1-q)BK] + (q - q²)(BK)⊗(BK)`.
pub fn lifted_matrix(sys: &SystemSpec, gain: &Gain, q: f64) -> Result<DMatrix<f64>> {
    if gain.k.shape() != (sys.m(), sys.n()) {
        return Err(Error::Dimension(format!(
            "gain must be {}x{}, got {}x{}",
            sys.m(),
            sys.n(),
            gain.k.nrows(),
            gain.k.ncols()
        )));
    }
    let bk = sys.b() * &gain.k;
    let mean = sys.a() + &bk * (1.0 - q);
    Ok(kron(&mean, &mean) + kron(&bk, &bk) * (q - q * q))
}

/// Exact mean-square stability test `ρ(Φ) < 1`.
pub fn exact_ms_stable(sys: &SystemSpec, gain: &Gain, q: f64) -> Result<StabilityVerdict> {
    let phi = lifted_matrix(sys, gain, q)?;
    let rho = numerics::spectral_radius(&phi, Some(&SymMatrix::identity(sys.n())))?;
    Ok(StabilityVerdict {
        criterion: Criterion::ExactLifted,
        certificate: rho,
        stable: rho < 1.0 - EXACT_MARGIN,
        margin_note: format!("stable iff rho < 1 - {EXACT_MARGIN:e}; necessary and sufficient"),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdVariant {
    General,
    Scalar,
    InvertibleB,
}

impl ThresholdVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::General => "general",
            Self::Scalar => "scalar",
            Self::InvertibleB => "invertible_b",
        }
    }
}

/// A lower bound on the stability threshold δ̄(q) and the scalars it is built from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdReport {
    pub variant: ThresholdVariant,
    pub q: f64,
    pub bound: f64,
    /// True when the bound degenerated and was replaced by `q_c`.
    pub clamped: bool,
    pub constituents: BTreeMap<String, f64>,
}

/// Lower bound on δ̄(q): for every `q̂` with `0 <= q - q̂ < bound` the CE
/// gain designed at `q̂` satisfies the Lyapunov condition at `q`.
///
/// - `General`: `λmin{Q^{1/2}(A^T P² A)^{-1} Q^{1/2}} / c₁`, with
///   `c₁ = λmax(B B^T) / λmin(R + B^T P₀ B)`.
/// - `Scalar`: `Q(R + B²P)/(A²B²P²) + (1 - q)R/(R + B²P)`.
/// - `InvertibleB`: `λmin{Ξ (A^T P A)^{-1} Ξ}` with
///   `Ξ = (Q + (1 - q) c₂ A^T P₀² A)^{1/2}` and
///   `c₂ = λmin(R) λmin(B B^T) / λmax(R + B^T P B)²`.
///
/// The λmin terms are evaluated as reciprocals of generalized eigenvalues,
/// `1 / λmax(Q^{-1/2} A^T P² A Q^{-1/2})` and `1 / λmax(Ξ^{-1} A^T P A Ξ^{-1})`,
/// which agree with the inverse forms whenever `A` is invertible and stay
/// defined when it is not. A vanishing pencil (e.g. `A = 0`) imposes no
/// constraint; the bound is then clamped to `q_c`.
pub fn st_lower_bound(sys: &SystemSpec, q: f64, variant: ThresholdVariant) -> Result<ThresholdReport> {
    check_variant(sys, variant)?;
    let p = mare_solve(sys, q)?.p;
    let mut constituents = BTreeMap::new();
    let raw = match variant {
        ThresholdVariant::General => {
            let p0 = dare_solve(sys)?.p;
            let bbt = SymMatrix::symmetrize(sys.b() * sys.b().transpose());
            let c1 = lambda_max(&bbt)? / lambda_min(&congruence_r(sys, &p0))?;
            let ap2a = SymMatrix::symmetrize(
                sys.a().transpose() * p.as_matrix() * p.as_matrix() * sys.a(),
            );
            let gen = generalized_max_eig(&ap2a, sys.q())?;
            constituents.insert("c1".to_string(), c1);
            constituents.insert("pencil_max_eig".to_string(), gen);
            if gen > 0.0 {
                let lmin_term = 1.0 / gen;
                constituents.insert("lambda_min_term".to_string(), lmin_term);
                Some(lmin_term / c1)
            } else {
                None
            }
        }
        ThresholdVariant::Scalar => {
            let (a, b) = (sys.a()[(0, 0)], sys.b()[(0, 0)]);
            let (qq, r) = (sys.q().scalar(), sys.r().scalar());
            let p = p.scalar();
            let denom = a * a * b * b * p * p;
            let control_term = (1.0 - q) * r / (r + b * b * p);
            constituents.insert("control_term".to_string(), control_term);
            if denom > 0.0 {
                let state_term = qq * (r + b * b * p) / denom;
                constituents.insert("state_term".to_string(), state_term);
                Some(state_term + control_term)
            } else {
                None
            }
        }
        ThresholdVariant::InvertibleB => {
            let p0 = dare_solve(sys)?.p;
            let bbt = SymMatrix::symmetrize(sys.b() * sys.b().transpose());
            let spread = lambda_max(&congruence_r(sys, &p))?;
            let c2 = lambda_min(sys.r())? * lambda_min(&bbt)? / (spread * spread);
            let ap0sq = sys.a().transpose() * p0.as_matrix() * p0.as_matrix() * sys.a();
            let xi_sq = SymMatrix::symmetrize(sys.q().as_matrix() + ap0sq * ((1.0 - q) * c2));
            let xi = psd_sqrt(&xi_sq)?;
            let apa = SymMatrix::symmetrize(sys.a().transpose() * p.as_matrix() * sys.a());
            // Ξ ≻ 0 because Q ≻ 0, so the pencil (A^T P A, Ξ²) is well posed.
            let gen = generalized_max_eig(&apa, &xi_sq)?;
            constituents.insert("c2".to_string(), c2);
            constituents.insert("xi_min_eig".to_string(), lambda_min(&xi)?);
            constituents.insert("pencil_max_eig".to_string(), gen);
            if gen > 0.0 {
                constituents.insert("lambda_min_term".to_string(), 1.0 / gen);
                Some(1.0 / gen)
            } else {
                None
            }
        }
    };
    let (bound, clamped) = match raw {
        Some(b) if b.is_finite() => (b, false),
        _ => (critical_probability(sys)?.upper, true),
    };
    Ok(ThresholdReport {
        variant,
        q,
        bound,
        clamped,
        constituents,
    })
}

/// `R + B^T X B`
fn congruence_r(sys: &SystemSpec, x: &SymMatrix) -> SymMatrix {
    SymMatrix::symmetrize(sys.r().as_matrix() + sys.b().transpose() * x.as_matrix() * sys.b())
}

fn check_variant(sys: &SystemSpec, variant: ThresholdVariant) -> Result<()> {
    match variant {
        ThresholdVariant::General => Ok(()),
        ThresholdVariant::Scalar => require_scalar(sys),
        ThresholdVariant::InvertibleB => {
            if !sys.b().is_square() {
                return Err(Error::Dimension(format!(
                    "invertible-B bound needs square B, got {}x{}",
                    sys.n(),
                    sys.m()
                )));
            }
            if sys.input_structure() != InputStructure::Invertible {
                return Err(Error::SingularTransform(
                    "invertible-B bound needs a well-conditioned B".into(),
                ));
            }
            Ok(())
        }
    }
}

/// Loss rate below which the CE gain stabilizes for every `q̂ ∈ [0, q_c)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SafeLossRate {
    pub variant: ThresholdVariant,
    /// Fixed point `q* = bound(q*)`.
    pub q_star: f64,
    /// False when no crossing exists in `[0, q_c)`; `q_star` is then 0 if the
    /// bound is already below `q` at `q = 0`, or `q_c` if it never drops below `q`.
    pub crossed: bool,
}

/// Solves `q* = st_lower_bound(sys, q*, variant).bound` by bisection on `[0, q_c)`.
///
/// `bound(q) - q` is decreasing in `q`; Riccati failures near `q_c` count as
/// the negative side.
pub fn zero_sample_safe_q(sys: &SystemSpec, variant: ThresholdVariant) -> Result<SafeLossRate> {
    check_variant(sys, variant)?;
    let excess = |q: f64| -> Result<Option<f64>> {
        match st_lower_bound(sys, q, variant) {
            Ok(r) => Ok(Some(r.bound - q)),
            Err(Error::NoSolution { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let positive = |v: Option<f64>| matches!(v, Some(x) if x > 0.0);

    if !positive(excess(0.0)?) {
        return Ok(SafeLossRate {
            variant,
            q_star: 0.0,
            crossed: false,
        });
    }
    let qc = critical_probability(sys)?.upper;
    let mut lo = 0.0;
    let mut hi = qc;
    if qc >= 1.0 {
        hi = 1.0 - 1e-12;
        if positive(excess(hi)?) {
            return Ok(SafeLossRate {
                variant,
                q_star: qc,
                crossed: false,
            });
        }
    }
    while hi - lo > FIXED_POINT_TOL {
        let mid = 0.5 * (lo + hi);
        if positive(excess(mid)?) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(SafeLossRate {
        variant,
        q_star: 0.5 * (lo + hi),
        crossed: true,
    })
}

/// Sufficient test used to paint cells blue in a region map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionCriterion {
    /// `q̂ >= q` or `q - q̂ <` the chosen stability-threshold bound.
    Threshold(ThresholdVariant),
    /// `C(q, q̂) ≻ 0` evaluated directly.
    Lyapunov,
    /// Scalar necessary-and-sufficient condition.
    ScalarIff,
}

impl RegionCriterion {
    pub fn name(self) -> String {
        match self {
            Self::Threshold(v) => format!("threshold_{}", v.name()),
            Self::Lyapunov => "lyapunov".to_string(),
            Self::ScalarIff => "scalar_iff".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellClass {
    /// Certified stabilizing by the sufficient criterion.
    BlueStabilizing,
    /// Exact test says the CE gain does not stabilize.
    RedUnstable,
    /// Stable by the exact test but not certified.
    GrayUndecided,
}

impl CellClass {
    pub fn name(self) -> &'static str {
        match self {
            Self::BlueStabilizing => "blue",
            Self::RedUnstable => "red",
            Self::GrayUndecided => "gray",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegionCell {
    pub q: f64,
    pub q_hat: f64,
    pub class: CellClass,
    /// ρ(Φ) of the CE gain designed at `q_hat`, evaluated at `q`.
    pub rho: f64,
}

/// Classification of the `(q, q̂)` plane.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionMap {
    pub criterion: RegionCriterion,
    pub step: f64,
    pub q_grid: Vec<f64>,
    pub q_hat_grid: Vec<f64>,
    /// Row-major: all `q̂` for `q_grid[0]`, then `q_grid[1]`, and so on.
    pub cells: Vec<RegionCell>,
}

impl RegionMap {
    pub fn cell(&self, qi: usize, qhi: usize) -> &RegionCell {
        &self.cells[qi * self.q_hat_grid.len() + qhi]
    }

    pub fn count(&self, class: CellClass) -> usize {
        self.cells.iter().filter(|c| c.class == class).count()
    }

    /// Blue cells the exact test rejects. Must be empty for a sound criterion.
    pub fn soundness_violations(&self) -> Vec<RegionCell> {
        self.cells
            .iter()
            .filter(|c| c.class == CellClass::BlueStabilizing && c.rho >= 1.0 - EXACT_MARGIN)
            .copied()
            .collect()
    }
}

/// Grid `0, step, 2·step, ...` strictly below `limit`.
fn grid_below(step: f64, limit: f64) -> Vec<f64> {
    (0..)
        .map(|i| i as f64 * step)
        .take_while(|&v| v < limit)
        .collect()
}

/// Classifies every `(q, q̂)` grid cell with `q, q̂ ∈ [0, q_c)`.
///
/// Grid points whose Riccati equation does not converge are dropped from the
/// grid. Cells are evaluated in parallel; `workers` pins the thread count
/// (`None` uses the global pool). The result does not depend on it.
pub fn region_map(
    sys: &SystemSpec,
    step: f64,
    criterion: RegionCriterion,
    workers: Option<usize>,
) -> Result<RegionMap> {
    if !(step > 0.0 && step <= 0.01) {
        return Err(Error::InvalidInput(format!("step {step} must lie in (0, 0.01]")));
    }
    match criterion {
        RegionCriterion::Threshold(v) => check_variant(sys, v)?,
        RegionCriterion::ScalarIff => require_scalar(sys)?,
        RegionCriterion::Lyapunov => {}
    }
    let qc = critical_probability(sys)?.upper;
    let grid = grid_below(step, qc.min(1.0));

    let run = || -> Result<RegionMap> {
        let designs: Vec<Option<CeDesign>> = grid
            .par_iter()
            .map(|&qh| match CeDesign::new(sys, qh) {
                Ok(d) => Ok(Some(d)),
                Err(Error::NoSolution { .. }) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        let bounds: Vec<Option<f64>> = match criterion {
            RegionCriterion::Threshold(v) => grid
                .par_iter()
                .map(|&q| match st_lower_bound(sys, q, v) {
                    Ok(r) => Ok(Some(r.bound)),
                    Err(Error::NoSolution { .. }) => Ok(None),
                    Err(e) => Err(e),
                })
                .collect::<Result<_>>()?,
            _ => designs.iter().map(|d| d.as_ref().map(|_| 0.0)).collect(),
        };

        let q_idx: Vec<usize> = (0..grid.len()).filter(|&i| bounds[i].is_some()).collect();
        let qh_idx: Vec<usize> = (0..grid.len()).filter(|&i| designs[i].is_some()).collect();

        let cells: Vec<RegionCell> = q_idx
            .par_iter()
            .map(|&qi| {
                let q = grid[qi];
                qh_idx
                    .iter()
                    .map(|&hi| {
                        let design = designs[hi].as_ref().expect("filtered");
                        classify(sys, design, q, bounds[qi].expect("filtered"), criterion)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();

        Ok(RegionMap {
            criterion,
            step,
            q_grid: q_idx.iter().map(|&i| grid[i]).collect(),
            q_hat_grid: qh_idx.iter().map(|&i| grid[i]).collect(),
            cells,
        })
    };

    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

fn classify(
    sys: &SystemSpec,
    design: &CeDesign,
    q: f64,
    bound: f64,
    criterion: RegionCriterion,
) -> Result<RegionCell> {
    let q_hat = design.q_hat();
    let certified = match criterion {
        RegionCriterion::Threshold(_) => q_hat >= q || q - q_hat < bound,
        RegionCriterion::Lyapunov => lyapunov_verdict(sys, design, q)?.stable,
        RegionCriterion::ScalarIff => scalar_iff_verdict(sys, design, q).stable,
    };
    let exact = exact_ms_stable(sys, &design.gain, q)?;
    let class = if certified {
        CellClass::BlueStabilizing
    } else if !exact.stable {
        CellClass::RedUnstable
    } else {
        CellClass::GrayUndecided
    };
    Ok(RegionCell {
        q,
        q_hat,
        class,
        rho: exact.certificate,
    })
}
