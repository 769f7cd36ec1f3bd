//! Certainty-equivalence LQR over an unknown Bernoulli packet-loss actuation channel.
//!
//! The controller only sees `N_q` channel samples, estimates the loss rate
//! `q̂`, and designs the optimal gain as if `q̂` were the true rate `q`. This
//! crate solves the modified Riccati equations involved, certifies
//! mean-square stability of the resulting closed loop (sufficient conditions
//! plus the exact lifted spectral-radius test), bounds how many samples are
//! needed, and measures the cost penalty paid for the estimation error.
//!
//! Modules, bottom-up:
//!
//! - [`numerics`]: dense eigen, square-root, Kronecker and spectral-radius primitives
//! - [`riccati`]: Riccati solvers, critical loss probability, CE gains
//! - [`stability`]: stability tests, stability-threshold bounds, region maps
//! - [`learning`]: loss-rate estimation, Hoeffding radii, sample complexity, certificates
//! - [`performance`]: second-moment Gramian and the optimality gap
//! - [`simulator`]: seeded Monte-Carlo rollouts of the lossy closed loop

pub mod error;
pub mod numerics;
pub mod performance;
pub mod riccati;
pub mod learning;
pub mod simulator;
pub mod stability;

pub use error::{Error, Result};
pub use numerics::SymMatrix;
pub use riccati::{
    ce_gain, critical_probability, dare_solve, mare_solve, optimal_cost, CriticalProbability,
    Gain, QcMethod, RiccatiSolution, SystemSpec,
};
