//! Seeded Monte-Carlo rollouts of `x_{t+1} = A xₜ + λₜ B uₜ` with `uₜ = K xₜ`.
//!
//! Randomness comes from ChaCha8 keyed by the run seed. Channel samples use
//! stream 0 and trajectory `i` uses stream `i + 1`, so every trajectory is
//! reproducible on its own and results do not depend on how work is split
//! across threads. Reductions run over fixed-size chunks in index order.
//!
//! Drops are drawn as `u < q` with `u = (next_u64 >> 11) · 2⁻⁵³`.
//!
//! Note that for the example systems the fourth moment of the closed loop
//! can grow even when the second moment decays, so sample means over long
//! horizons are dominated by rare long drop bursts. Empirical decay checks
//! are most informative over short horizons with large ensembles.

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::learning::ChannelSamples;
use crate::numerics::{psd_sqrt, SymMatrix};
use crate::performance::second_moment_sum;
use crate::riccati::{Gain, SystemSpec};
use crate::stability::exact_ms_stable;

/// State norm beyond which a trajectory is flagged divergent and truncated.
pub const DIVERGENCE_NORM: f64 = 1e150;
/// A fitted log-slope below this counts as mean-square decay.
pub const DECAY_SLOPE: f64 = -1e-3;

const CHANNEL_STREAM: u64 = 0;
const CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub seed: u64,
    pub horizon: usize,
    pub trajectories: usize,
    pub truncation_note: String,
}

impl SimConfig {
    pub fn new(seed: u64, horizon: usize, trajectories: usize) -> Result<Self> {
        if horizon == 0 || trajectories == 0 {
            return Err(Error::InvalidInput(
                "horizon and trajectory count must be at least 1".into(),
            ));
        }
        Ok(Self {
            seed,
            horizon,
            trajectories,
            truncation_note: format!(
                "infinite-horizon cost truncated at T = {horizon}; bias below 1e-4 of the mean \
                 when rho(Phi)^T * tr(S) < 1e-4 * J"
            ),
        })
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::new(0, 200, 10_000).expect("valid defaults")
    }
}

/// Initial state: fixed, or Gaussian with the given mean and covariance.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Fixed(DVector<f64>),
    Gaussian { mean: DVector<f64>, cov: SymMatrix },
}

impl InitialState {
    fn dim(&self) -> usize {
        match self {
            Self::Fixed(x) => x.len(),
            Self::Gaussian { mean, .. } => mean.len(),
        }
    }

    /// `E[x₀ x₀^T]`
    pub fn second_moment(&self) -> SymMatrix {
        match self {
            Self::Fixed(x) => SymMatrix::outer(x),
            Self::Gaussian { mean, cov } => {
                SymMatrix::symmetrize(cov.as_matrix() + mean * mean.transpose())
            }
        }
    }
}

/// Draw source for one trajectory.
struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    fn for_trajectory(seed: u64, index: usize) -> Self {
        Self::new(seed, index as u64 + 1)
    }

    fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// `λ = 0` with probability `q`.
    fn delivered(&mut self, q: f64) -> bool {
        self.uniform() >= q
    }

    fn initial(&mut self, init: &InitialState, root: Option<&DMatrix<f64>>) -> DVector<f64> {
        match init {
            InitialState::Fixed(x) => x.clone(),
            InitialState::Gaussian { mean, .. } => {
                let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(&mut self.rng));
                mean + root.expect("covariance root") * z
            }
        }
    }
}

/// Draws `N` i.i.d. delivery indicators, 1 with probability `1 - q`.
pub fn sample_channel(q: f64, n: usize, seed: u64) -> Result<ChannelSamples> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidInput(format!("loss rate {q} must lie in (0, 1)")));
    }
    if n == 0 {
        return Err(Error::InvalidInput("sample count must be at least 1".into()));
    }
    let mut s = Sampler::new(seed, CHANNEL_STREAM);
    ChannelSamples::new((0..n).map(|_| u8::from(s.delivered(q))).collect())
}

/// One realized closed-loop path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    /// `x₀ … x_T`, shorter if the path diverged.
    pub states: Vec<Vec<f64>>,
    /// `λ₀ … λ_{T-1}`
    pub drops: Vec<u8>,
    /// `Σₜ xₜ^T Q xₜ + λₜ uₜ^T R uₜ` over `t < T`.
    pub realized_cost: f64,
    pub divergent: bool,
}

struct Rollout {
    cost: f64,
    divergent: bool,
}

/// Runs one path, calling `visit(t, x_t)` for every state reached.
#[allow(clippy::too_many_arguments)]
fn rollout(
    sys: &SystemSpec,
    gain: &Gain,
    q: f64,
    x0: DVector<f64>,
    horizon: usize,
    sampler: &mut Sampler,
    mut on_drop: impl FnMut(bool),
    mut visit: impl FnMut(usize, &DVector<f64>),
) -> Rollout {
    let (a, b, k) = (sys.a(), sys.b(), &gain.k);
    let (qm, rm) = (sys.q().as_matrix(), sys.r().as_matrix());
    let mut x = x0;
    let mut next = DVector::zeros(x.len());
    let mut u = DVector::zeros(k.nrows());
    let mut cost = 0.0;
    visit(0, &x);
    for t in 0..horizon {
        let delivered = sampler.delivered(q);
        on_drop(delivered);
        u.gemv(1.0, k, &x, 0.0);
        cost += x.dot(&(qm * &x));
        next.gemv(1.0, a, &x, 0.0);
        if delivered {
            cost += u.dot(&(rm * &u));
            next.gemv(1.0, b, &u, 1.0);
        }
        std::mem::swap(&mut x, &mut next);
        let norm = x.norm();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Rollout {
                cost: f64::INFINITY,
                divergent: true,
            };
        }
        visit(t + 1, &x);
    }
    Rollout {
        cost,
        divergent: false,
    }
}

fn check_dims(sys: &SystemSpec, gain: &Gain, init: &InitialState) -> Result<Option<DMatrix<f64>>> {
    if gain.k.shape() != (sys.m(), sys.n()) {
        return Err(Error::Dimension(format!("gain must be {}x{}", sys.m(), sys.n())));
    }
    if init.dim() != sys.n() {
        return Err(Error::Dimension(format!("initial state must have {} entries", sys.n())));
    }
    match init {
        InitialState::Fixed(_) => Ok(None),
        InitialState::Gaussian { cov, .. } => {
            if cov.dim() != sys.n() {
                return Err(Error::Dimension("initial covariance has wrong size".into()));
            }
            Ok(Some(psd_sqrt(cov)?.into_matrix()))
        }
    }
}

/// Simulates trajectory 0 of the run described by `cfg`.
pub fn simulate_trajectory(
    sys: &SystemSpec,
    gain: &Gain,
    q: f64,
    x0: &DVector<f64>,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    let init = InitialState::Fixed(x0.clone());
    check_dims(sys, gain, &init)?;
    let mut sampler = Sampler::for_trajectory(cfg.seed, 0);
    let mut states = Vec::with_capacity(cfg.horizon + 1);
    let mut drops = Vec::with_capacity(cfg.horizon);
    let run = rollout(
        sys,
        gain,
        q,
        x0.clone(),
        cfg.horizon,
        &mut sampler,
        |d| drops.push(u8::from(d)),
        |_, x| states.push(x.iter().copied().collect()),
    );
    Ok(Trajectory {
        states,
        drops,
        realized_cost: run.cost,
        divergent: run.divergent,
    })
}

/// Sample mean and standard error of the realized cost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_err: f64,
    /// Trajectories that contributed (divergent ones are excluded).
    pub trajectories: usize,
    pub divergent: usize,
    pub horizon: usize,
}

/// Running count, mean, and sum of squared deviations.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }

    fn merge(self, other: Self) -> Self {
        if self.n == 0 {
            return other;
        }
        if other.n == 0 {
            return self;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        Self {
            n,
            mean: self.mean + d * other.n as f64 / n as f64,
            m2: self.m2 + other.m2 + d * d * (self.n as f64 * other.n as f64) / n as f64,
        }
    }
}

fn chunk_ranges(total: usize) -> Vec<std::ops::Range<usize>> {
    (0..total)
        .step_by(CHUNK)
        .map(|s| s..(s + CHUNK).min(total))
        .collect()
}

/// Monte-Carlo estimate of the truncated infinite-horizon cost.
pub fn monte_carlo_cost(
    sys: &SystemSpec,
    gain: &Gain,
    q: f64,
    init: &InitialState,
    cfg: &SimConfig,
) -> Result<CostEstimate> {
    let root = check_dims(sys, gain, init)?;
    let partials: Vec<(Moments, usize)> = chunk_ranges(cfg.trajectories)
        .into_par_iter()
        .map(|range| {
            let mut m = Moments::default();
            let mut divergent = 0;
            for i in range {
                let mut sampler = Sampler::for_trajectory(cfg.seed, i);
                let x0 = sampler.initial(init, root.as_ref());
                let run = rollout(sys, gain, q, x0, cfg.horizon, &mut sampler, |_| {}, |_, _| {});
                if run.divergent {
                    divergent += 1;
                } else {
                    m.push(run.cost);
                }
            }
            (m, divergent)
        })
        .collect();
    let (moments, divergent) = partials
        .into_iter()
        .fold((Moments::default(), 0), |(acc, d), (m, dm)| (acc.merge(m), d + dm));
    if moments.n == 0 {
        return Err(Error::Unstable { rho: f64::INFINITY });
    }
    let var = if moments.n > 1 {
        moments.m2 / (moments.n - 1) as f64
    } else {
        0.0
    };
    Ok(CostEstimate {
        mean: moments.mean,
        std_err: (var / moments.n as f64).sqrt(),
        trajectories: moments.n,
        divergent,
        horizon: cfg.horizon,
    })
}

/// Ensemble second moments `E_M[xₜ xₜ^T]` for `t = 0..=T`.
///
/// Divergent paths make every later moment infinite.
pub fn empirical_second_moments(
    sys: &SystemSpec,
    gain: &Gain,
    q: f64,
    init: &InitialState,
    cfg: &SimConfig,
) -> Result<Vec<SymMatrix>> {
    let root = check_dims(sys, gain, init)?;
    let n = sys.n();
    let len = cfg.horizon + 1;
    let partials: Vec<Vec<DMatrix<f64>>> = chunk_ranges(cfg.trajectories)
        .into_par_iter()
        .map(|range| {
            let mut acc = vec![DMatrix::zeros(n, n); len];
            for i in range {
                let mut sampler = Sampler::for_trajectory(cfg.seed, i);
                let x0 = sampler.initial(init, root.as_ref());
                let mut reached = 0;
                let run = rollout(sys, gain, q, x0, cfg.horizon, &mut sampler, |_| {}, |t, x| {
                    acc[t] += x * x.transpose();
                    reached = t;
                });
                if run.divergent {
                    for m in &mut acc[reached + 1..] {
                        m.fill(f64::INFINITY);
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![DMatrix::zeros(n, n); len];
    for part in partials {
        for (t, m) in part.into_iter().enumerate() {
            total[t] += m;
        }
    }
    let scale = 1.0 / cfg.trajectories as f64;
    Ok(total
        .into_iter()
        .map(|m| SymMatrix::symmetrize(m * scale))
        .collect())
}

/// Empirical mean-square decay check against the exact rate `log ρ(Φ)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayReport {
    /// Least-squares slope of `log E_M‖xₜ‖²` over `t ∈ [T/2, T]`.
    pub slope: f64,
    /// `log ρ(Φ)`
    pub predicted_slope: f64,
    pub rho: f64,
    /// `slope < DECAY_SLOPE`
    pub stable: bool,
    pub mean_sq_norm: Vec<f64>,
}

pub fn empirical_ms_decay(
    sys: &SystemSpec,
    gain: &Gain,
    q: f64,
    init: &InitialState,
    cfg: &SimConfig,
) -> Result<DecayReport> {
    let moments = empirical_second_moments(sys, gain, q, init, cfg)?;
    let mean_sq_norm: Vec<f64> = moments.iter().map(SymMatrix::trace).collect();
    let rho = exact_ms_stable(sys, gain, q)?.certificate;
    let window: Vec<(f64, f64)> = (cfg.horizon / 2..=cfg.horizon)
        .map(|t| (t as f64, mean_sq_norm[t]))
        .collect();
    let slope = if window.iter().any(|&(_, v)| !v.is_finite()) {
        f64::INFINITY
    } else if window.iter().any(|&(_, v)| v <= 0.0) {
        f64::NEG_INFINITY
    } else if window.len() < 2 {
        0.0
    } else {
        let pts: Vec<(f64, f64)> = window.iter().map(|&(t, v)| (t, v.ln())).collect();
        least_squares_slope(&pts)
    };
    Ok(DecayReport {
        slope,
        predicted_slope: rho.ln(),
        rho,
        stable: slope < DECAY_SLOPE,
        mean_sq_norm,
    })
}

fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Smallest horizon `T` with `ρ(Φ)^T · tr(S) < 1e-4 · J`, where `J` is the
/// exact closed-loop cost. `None` when the loop is not mean-square stable.
pub fn recommended_horizon(sys: &SystemSpec, gain: &Gain, q: f64, init: &InitialState) -> Result<Option<usize>> {
    let x0 = init.second_moment();
    let s = match second_moment_sum(sys, gain, q, &x0) {
        Ok(s) => s,
        Err(Error::Unstable { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let rho = exact_ms_stable(sys, gain, q)?.certificate;
    let stage = sys.q().as_matrix()
        + gain.k.transpose() * sys.r().as_matrix() * &gain.k * (1.0 - q);
    let j = (stage * s.as_matrix()).trace();
    let tr = s.trace();
    if tr == 0.0 || rho == 0.0 || j == 0.0 {
        return Ok(Some(1));
    }
    let t = ((1e-4 * j / tr).ln() / rho.ln()).ceil().max(1.0);
    Ok(Some(t as usize))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::estimate_loss_rate;
    use crate::riccati::ce_gain;
    use nalgebra::dmatrix;

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
    fn channel_samples_are_reproducible() {
        let a = sample_channel(0.3, 1000, 42).unwrap();
        let b = sample_channel(0.3, 1000, 42).unwrap();
        let c = sample_channel(0.3, 1000, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(sample_channel(0.0, 10, 1).is_err());
        assert!(sample_channel(1.0, 10, 1).is_err());
        assert!(sample_channel(0.5, 0, 1).is_err());
    }

    #[test]
    fn channel_loss_fraction_concentrates() {
        let s = sample_channel(0.2, 1_000_000, 7).unwrap();
        let q_hat = estimate_loss_rate(&s).unwrap();
        assert!((q_hat - 0.2).abs() < 0.002, "{q_hat}");
    }

    #[test]
    fn open_loop_follows_powers_of_a() {
        let sys = example2();
        let gain = Gain::new(DMatrix::zeros(2, 2), 0.0);
        let x0 = DVector::from_vec(vec![1.0, -2.0]);
        let cfg = SimConfig::new(3, 10, 1).unwrap();
        let traj = simulate_trajectory(&sys, &gain, 0.3, &x0, &cfg).unwrap();
        let mut x = x0.clone();
        for state in &traj.states {
            assert_eq!(state.as_slice(), x.as_slice());
            x = sys.a() * x;
        }
        assert_eq!(traj.states.len(), 11);
        assert_eq!(traj.drops.len(), 10);
    }

    #[test]
    fn deadbeat_with_delivery_reaches_origin() {
        let sys = example1();
        let gain = Gain::new(dmatrix![-1.5], 0.0);
        // Find a seed whose first packet is delivered at q = 0.5.
        let cfg = (0..100)
            .map(|s| SimConfig::new(s, 5, 1).unwrap())
            .find(|c| {
                simulate_trajectory(&sys, &gain, 0.5, &DVector::from_element(1, 1.0), c)
                    .unwrap()
                    .drops[0]
                    == 1
            })
            .unwrap();
        let traj = simulate_trajectory(&sys, &gain, 0.5, &DVector::from_element(1, 1.0), &cfg).unwrap();
        assert!(traj.states[1..].iter().all(|s| s[0] == 0.0));
    }

    #[test]
    fn divergence_is_flagged() {
        let sys = example1();
        let gain = Gain::new(dmatrix![0.0], 0.0);
        let cfg = SimConfig::new(0, 2000, 1).unwrap();
        let traj = simulate_trajectory(&sys, &gain, 0.5, &DVector::from_element(1, 1.0), &cfg).unwrap();
        assert!(traj.divergent);
        assert!(traj.states.len() < 2001);
    }

    #[test]
    fn realized_cost_matches_recursion() {
        let sys = example2();
        let (gain, _) = ce_gain(&sys, 0.1).unwrap();
        let x0 = DVector::from_vec(vec![0.9325, 1.1616]);
        let cfg = SimConfig::new(11, 30, 1).unwrap();
        let traj = simulate_trajectory(&sys, &gain, 0.2, &x0, &cfg).unwrap();
        let mut cost = 0.0;
        for t in 0..30 {
            let x = DVector::from_vec(traj.states[t].clone());
            let u = &gain.k * &x;
            let lam = f64::from(traj.drops[t]);
            cost += x.dot(&x) + lam * u.dot(&u);
            let next = sys.a() * &x + sys.b() * &u * lam;
            let recorded = DVector::from_vec(traj.states[t + 1].clone());
            assert!((next - recorded).norm() < 1e-14);
        }
        assert!((cost - traj.realized_cost).abs() < 1e-12 * cost);
    }

    #[test]
    fn never_dropping_channel_recovers_lqr_cost() {
        let sys = example2();
        let (gain, sol) = ce_gain(&sys, 0.0).unwrap();
        let x0 = DVector::from_vec(vec![1.0, -0.5]);
        // q = 0 is outside the channel model's (0, 1) but the rollout accepts it.
        let est = monte_carlo_cost(&sys, &gain, 0.0, &InitialState::Fixed(x0.clone()), &SimConfig::new(0, 200, 4).unwrap())
            .unwrap();
        let j = x0.dot(&(sol.p.as_matrix() * &x0));
        assert!((est.mean - j).abs() < 1e-9 * j);
        assert_eq!(est.std_err, 0.0);
    }

    #[test]
    fn monte_carlo_is_reproducible() {
        let sys = example1();
        let (gain, _) = ce_gain(&sys, 0.0).unwrap();
        let init = InitialState::Fixed(DVector::from_element(1, 1.0));
        let cfg = SimConfig::new(9, 50, 1).unwrap();
        let a = monte_carlo_cost(&sys, &gain, 0.2, &init, &cfg).unwrap();
        let b = monte_carlo_cost(&sys, &gain, 0.2, &init, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recommended_horizon_is_short_for_examples() {
        let sys = example1();
        let (gain, _) = ce_gain(&sys, 0.0).unwrap();
        let init = InitialState::Fixed(DVector::from_element(1, 1.0));
        let t = recommended_horizon(&sys, &gain, 0.2, &init).unwrap().unwrap();
        assert!(t < 200, "{t}");
        assert_eq!(recommended_horizon(&sys, &gain, 0.4, &init).unwrap(), None);
    }

    #[test]
    fn gaussian_initial_state_moments() {
        let sys = example2();
        let (gain, _) = ce_gain(&sys, 0.2).unwrap();
        let init = InitialState::Gaussian {
            mean: DVector::from_vec(vec![1.0, 0.0]),
            cov: SymMatrix::new(dmatrix![0.5, 0.1; 0.1, 0.3]).unwrap(),
        };
        let cfg = SimConfig::new(5, 1, 200_000).unwrap();
        let m = empirical_second_moments(&sys, &gain, 0.2, &init, &cfg).unwrap();
        let expected = init.second_moment();
        assert!((m[0].as_matrix() - expected.as_matrix()).norm() < 0.01);
    }

    #[test]
    fn deadbeat_decay_floor() {
        let sys = example1();
        let gain = Gain::new(dmatrix![-1.5], 0.0);
        let init = InitialState::Fixed(DVector::from_element(1, 1.0));
        let rep = empirical_ms_decay(&sys, &gain, 0.0, &init, &SimConfig::new(0, 10, 10).unwrap()).unwrap();
        assert_eq!(rep.slope, f64::NEG_INFINITY);
        assert!(rep.stable);
    }
}
