//! Modified and standard algebraic Riccati equations, the critical loss
//! probability, and certainty-equivalence gains.
//!
//! The modified Riccati map is
//!
//! ```text
//! g_q(X) = Q + A^T X A - (1 - q) A^T X B (R + B^T X B)^{-1} B^T X A
//! ```
//!
//! and its positive definite fixed point exists iff `q < q_c`. Solutions are
//! found by plain fixed-point iteration from `X = Q`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{self, ensure_finite, lambda_min, SymMatrix};

/// Iteration cap for the Riccati fixed-point iteration.
pub const MAX_ITER: usize = 100_000;
/// Frobenius norm above which the iteration is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;
/// Required relative fixed-point residual of a returned solution.
pub const RESIDUAL_TOL: f64 = 1e-10;
/// Relative change between successive iterates that stops the iteration.
pub const STEP_TOL: f64 = 1e-12;
/// Relative singular-value threshold for rank decisions on `B`.
pub const RANK_TOL: f64 = 1e-10;
/// Eigenvalues of `A` with modulus above `1 + UNSTABLE_TOL` count as unstable.
pub const UNSTABLE_TOL: f64 = 1e-9;
/// Absolute width of the bisection bracket for `q_c` on general `B`.
pub const QC_BISECTION_TOL: f64 = 1e-6;

/// Plant and cost: `x_{t+1} = A x_t + λ_t B u_t`, stage cost `x^T Q x + λ u^T R u`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: SymMatrix,
    r: SymMatrix,
}

impl SystemSpec {
    /// Validates shapes, finiteness, `Q ≻ 0`, `R ≻ 0`, and stabilizability
    /// of `(A, B)` (via convergence of the standard Riccati iteration).
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::Dimension(format!(
                "A must be non-empty and square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "B must be {n}xm with m >= 1, got {}x{}",
                b.nrows(),
                b.ncols()
            )));
        }
        let m = b.ncols();
        if q.shape() != (n, n) {
            return Err(Error::Dimension(format!("Q must be {n}x{n}")));
        }
        if r.shape() != (m, m) {
            return Err(Error::Dimension(format!("R must be {m}x{m}")));
        }
        ensure_finite(&a)?;
        ensure_finite(&b)?;
        let q = SymMatrix::new(q)?;
        let r = SymMatrix::new(r)?;
        if lambda_min(&q)? <= 0.0 {
            return Err(Error::InvalidInput("Q must be positive definite".into()));
        }
        if lambda_min(&r)? <= 0.0 {
            return Err(Error::InvalidInput("R must be positive definite".into()));
        }
        let sys = Self { a, b, q, r };
        dare_solve(&sys).map_err(|_| {
            Error::InvalidInput("(A, B) is not stabilizable: standard Riccati iteration diverged".into())
        })?;
        Ok(sys)
    }

    /// Single-state, single-input system.
    pub fn scalar(a: f64, b: f64, q: f64, r: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
        )
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn q(&self) -> &SymMatrix {
        &self.q
    }

    pub fn r(&self) -> &SymMatrix {
        &self.r
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn is_scalar(&self) -> bool {
        self.n() == 1 && self.m() == 1
    }

    /// Structural class of `B` from its singular values.
    pub fn input_structure(&self) -> InputStructure {
        let sv = self.b.clone().singular_values();
        let max = sv.max();
        if max == 0.0 {
            return InputStructure::Degenerate;
        }
        let rank = sv.iter().filter(|&&s| s > RANK_TOL * max).count();
        if self.b.is_square() && rank == self.n() {
            InputStructure::Invertible
        } else if rank == 1 {
            InputStructure::RankOne
        } else {
            InputStructure::General
        }
    }
}

/// Rank class of the input matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputStructure {
    Invertible,
    RankOne,
    General,
    Degenerate,
}

/// A positive definite Riccati fixed point with solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiccatiSolution {
    pub p: SymMatrix,
    pub q_used: f64,
    pub iterations: usize,
    /// `‖g(P) - P‖_F / (1 + ‖P‖_F)`
    pub residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QcMethod {
    InvertibleB,
    RankOneB,
    BracketOnly,
    Bisection,
}

/// Critical loss probability, exact when a closed form applies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalProbability {
    pub lower: f64,
    pub upper: f64,
    pub exact: Option<f64>,
    pub method: QcMethod,
}

impl CriticalProbability {
    /// Exact value when known, otherwise the midpoint of the bracket.
    pub fn estimate(&self) -> f64 {
        self.exact.unwrap_or(0.5 * (self.lower + self.upper))
    }

    fn exact(value: f64, method: QcMethod) -> Self {
        Self {
            lower: value,
            upper: value,
            exact: Some(value),
            method,
        }
    }
}

/// State-feedback gain `u = K x` together with the loss rate it was designed for.
#[derive(Debug, Clone, PartialEq)]
pub struct Gain {
    pub k: DMatrix<f64>,
    pub q_design: f64,
}

impl Gain {
    pub fn new(k: DMatrix<f64>, q_design: f64) -> Self {
        Self { k, q_design }
    }
}

impl Serialize for Gain {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = serializer.serialize_struct("Gain", 2)?;
        st.serialize_field("k", &numerics::matrix_rows(&self.k))?;
        st.serialize_field("q_design", &self.q_design)?;
        st.end()
    }
}

/// Pieces of the Riccati map evaluated at `X`.
pub(crate) struct RiccatiTerms {
    /// `A^T X A`
    pub axa: DMatrix<f64>,
    /// `A^T X B (R + B^T X B)^{-1} B^T X A`
    pub w: DMatrix<f64>,
    /// `-(R + B^T X B)^{-1} B^T X A`
    pub gain: DMatrix<f64>,
}

pub(crate) fn riccati_terms(sys: &SystemSpec, x: &DMatrix<f64>) -> Result<RiccatiTerms> {
    let a = &sys.a;
    let b = &sys.b;
    let xa = x * a;
    let btx = b.transpose() * x;
    let s = sys.r.as_matrix() + &btx * b;
    let btxa = b.transpose() * &xa;
    let solved = match s.clone().cholesky() {
        Some(c) => c.solve(&btxa),
        None => s
            .lu()
            .solve(&btxa)
            .ok_or_else(|| Error::NumericalFailure("R + B^T X B is singular".into()))?,
    };
    let w = btxa.transpose() * &solved;
    Ok(RiccatiTerms {
        axa: a.transpose() * xa,
        w,
        gain: -solved,
    })
}

fn riccati_map(sys: &SystemSpec, x: &DMatrix<f64>, loss: f64) -> Result<DMatrix<f64>> {
    let t = riccati_terms(sys, x)?;
    let next = sys.q.as_matrix() + t.axa - t.w * (1.0 - loss);
    Ok(SymMatrix::symmetrize(next).into_matrix())
}

/// Solves the modified Riccati equation at loss rate `q` by fixed-point iteration from `Q`.
pub fn mare_solve(sys: &SystemSpec, q: f64) -> Result<RiccatiSolution> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::InvalidInput(format!("loss rate {q} must lie in [0, 1)")));
    }
    let no_solution = |reason: &str| Error::NoSolution {
        q,
        reason: reason.to_string(),
    };
    let mut x = sys.q.as_matrix().clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < MAX_ITER {
        let next = riccati_map(sys, &x, q)?;
        iterations += 1;
        let norm = next.norm();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(no_solution("iterate norm exceeded divergence threshold"));
        }
        let step = (&next - &x).norm();
        x = next;
        if step <= STEP_TOL * (1.0 + norm) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(no_solution("iteration cap reached without convergence"));
    }
    let residual = (riccati_map(sys, &x, q)? - &x).norm() / (1.0 + x.norm());
    if residual > RESIDUAL_TOL {
        return Err(no_solution("fixed-point residual above tolerance"));
    }
    let p = SymMatrix::symmetrize(x);
    if lambda_min(&p)? <= 0.0 {
        return Err(no_solution("fixed point is not positive definite"));
    }
    Ok(RiccatiSolution {
        p,
        q_used: q,
        iterations,
        residual,
    })
}

/// Standard discrete algebraic Riccati equation, the `q = 0` case.
pub fn dare_solve(sys: &SystemSpec) -> Result<RiccatiSolution> {
    mare_solve(sys, 0.0)
}

/// Moduli of the eigenvalues of `A` above `1 + UNSTABLE_TOL`.
pub fn unstable_moduli(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    let schur = a
        .clone()
        .try_schur(f64::EPSILON, 100_000)
        .ok_or_else(|| Error::NumericalFailure("Schur decomposition of A did not converge".into()))?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .filter(|&m| m > 1.0 + UNSTABLE_TOL)
        .collect())
}

/// Critical loss probability `q_c`.
///
/// Closed forms for invertible and rank-one `B`; otherwise the bracket
/// `[1/Π|λu|², 1/max|λu|²]` refined by bisection with Riccati convergence
/// as the feasibility test. A Schur-stable `A` imposes no constraint and
/// yields `q_c = 1`.
pub fn critical_probability(sys: &SystemSpec) -> Result<CriticalProbability> {
    let unstable = unstable_moduli(&sys.a)?;
    let structure = sys.input_structure();
    let method = match structure {
        InputStructure::Invertible => QcMethod::InvertibleB,
        InputStructure::RankOne => QcMethod::RankOneB,
        _ => QcMethod::BracketOnly,
    };
    if unstable.is_empty() {
        return Ok(CriticalProbability::exact(1.0, method));
    }
    let max = unstable.iter().copied().fold(0.0, f64::max);
    let prod: f64 = unstable.iter().product();
    let upper = 1.0 / (max * max);
    let lower = 1.0 / (prod * prod);
    match structure {
        InputStructure::Invertible => Ok(CriticalProbability::exact(upper, method)),
        InputStructure::RankOne => Ok(CriticalProbability::exact(lower, method)),
        _ if upper - lower <= f64::EPSILON * upper => {
            Ok(CriticalProbability::exact(upper, QcMethod::BracketOnly))
        }
        _ => {
            let (mut lo, mut hi) = (lower, upper);
            while hi - lo > QC_BISECTION_TOL {
                let mid = 0.5 * (lo + hi);
                match mare_solve(sys, mid) {
                    Ok(_) => lo = mid,
                    Err(Error::NoSolution { .. }) => hi = mid,
                    Err(e) => return Err(e),
                }
            }
            Ok(CriticalProbability {
                lower: lo,
                upper: hi,
                exact: None,
                method: QcMethod::Bisection,
            })
        }
    }
}

/// Certainty-equivalence gain `K̂ = -(R + B^T P̂ B)^{-1} B^T P̂ A` designed for `q_hat`.
pub fn ce_gain(sys: &SystemSpec, q_hat: f64) -> Result<(Gain, RiccatiSolution)> {
    let sol = mare_solve(sys, q_hat)?;
    let k = riccati_terms(sys, sol.p.as_matrix())?.gain;
    Ok((Gain::new(k, q_hat), sol))
}

/// Expected cost `tr(P X0)` with `X0 = E[x0 x0^T]`.
pub fn optimal_cost(p: &SymMatrix, x0: &SymMatrix) -> f64 {
    (p.as_matrix() * x0.as_matrix()).trace()
}
