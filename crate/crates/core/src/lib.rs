//! Closed-loop learning of MPC stage costs via stability-informed Bayesian
//! optimization.
//!
//! The controlled plant is an inverted double pendulum that an MPC steers to
//! the upright set-point. The MPC stage cost is a fixed quadratic plus a
//! feedforward-network correction whose flattened weights are the decision
//! variable of a Bayesian optimization loop. Each BO query runs one
//! closed-loop episode and observes a performance measure together with two
//! Lyapunov-style constraint values derived from the MPC optimal value
//! function; the constraints enter the acquisition function as a softplus
//! penalty.
//!
//! Module layout:
//!
//! * [`dynamics`] — pendulum dynamics, RK4 discretization, linearization and
//!   the prediction-model variants,
//! * [`cost`] — quadratic stage cost, network correction term, Riccati
//!   terminal cost,
//! * [`mpc`] — single-shooting OCP solver and the receding-horizon policy,
//! * [`episode`] — closed-loop rollouts and the scalar observations
//!   (performance, Lyapunov positivity, Lyapunov decrease),
//! * [`gp`] — exact Gaussian-process regression with Matérn kernels,
//! * [`bo`] — expected improvement, penalty term and the constrained BO loop,
//! * [`config`] / [`experiment`] — experiment presets, orchestration,
//!   run logs and plot-data export.

pub mod bo;
pub mod config;
pub mod cost;
pub mod dynamics;
pub mod episode;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod mpc;
pub mod pqn;

pub use error::{Error, Result};
