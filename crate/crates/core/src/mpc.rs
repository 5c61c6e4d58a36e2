//! Single-shooting solver for the finite-horizon optimal control problem and
//! the receding-horizon policy built on it.
//!
//! The decision variable is the input sequence; states are eliminated by
//! forward simulation of the prediction model. Only input box constraints
//! are active, so the problem is solved by projected quasi-Newton descent
//! with an adjoint gradient. The learned stage cost makes the problem
//! nonconvex; local minima are accepted and warm starting keeps the closed
//! loop deterministic.

use nalgebra::Vector4;
use serde::{Deserialize, Serialize};

use crate::cost::{nn_forward, nn_input_gradient, terminal_cost, CostWeights, NetworkShape};
use crate::dynamics::{DiscreteModel, Input, State, DEFAULT_U_MAX, DEFAULT_U_MIN};
use crate::error::{Error, Result};
use crate::pqn::{self, PqnOptions, PqnStatus};

/// Finite cost assigned to diverged solves so downstream bookkeeping stays
/// finite.
pub const DIVERGED_COST: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmStartPolicy {
    /// Previous solution shifted by one stage, last input repeated.
    Shift,
    /// Always start from the constant set-point input.
    Cold,
}

/// Horizon, input bounds and solver settings of the optimal control problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpConfig {
    /// Prediction horizon in steps.
    pub horizon: usize,
    pub u_min: f64,
    pub u_max: f64,
    /// Convergence tolerance on the projected-gradient max-norm.
    pub tol_kkt: f64,
    pub max_iter: usize,
    pub warm_start: WarmStartPolicy,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            u_min: DEFAULT_U_MIN,
            u_max: DEFAULT_U_MAX,
            tol_kkt: 1e-6,
            max_iter: 200,
            warm_start: WarmStartPolicy::Shift,
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Precondition("OCP horizon must be at least 1".into()));
        }
        if !(self.u_min < self.u_max) {
            return Err(Error::Precondition(format!(
                "input bounds must satisfy u_min < u_max, got [{}, {}]",
                self.u_min, self.u_max
            )));
        }
        if !(self.tol_kkt > 0.0) {
            return Err(Error::Precondition("tol_kkt must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    MaxIter,
    Diverged,
}

impl std::fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolverStatus::Converged => "converged",
            SolverStatus::MaxIter => "max_iter",
            SolverStatus::Diverged => "diverged",
        })
    }
}

/// Result of one OCP solve.
#[derive(Debug, Clone)]
pub struct OcpSolution {
    /// Optimal input sequence, length N, always within bounds.
    pub u_seq: Vec<f64>,
    /// Predicted states, length N+1 (empty on divergence).
    pub x_pred: Vec<State>,
    /// Optimal value J*(x_k); [`DIVERGED_COST`] sentinel on divergence.
    pub j_star: f64,
    pub status: SolverStatus,
    /// Achieved projected-gradient max-norm.
    pub stationarity: f64,
    /// Costs of the accepted solver iterates (monotone nonincreasing).
    pub cost_history: Vec<f64>,
}

/// One parameterized optimal control problem: prediction model, learned
/// stage cost and solver settings.
pub struct Ocp<'a> {
    model: &'a DiscreteModel,
    theta: &'a [f64],
    weights: &'a CostWeights,
    shape: &'a NetworkShape,
    cfg: &'a OcpConfig,
    nn_at_setpoint: f64,
}

impl<'a> Ocp<'a> {
    pub fn new(
        model: &'a DiscreteModel,
        theta: &'a [f64],
        weights: &'a CostWeights,
        shape: &'a NetworkShape,
        cfg: &'a OcpConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let nn_at_setpoint = nn_forward(&weights.x_d, theta, shape)?;
        Ok(Self { model, theta, weights, shape, cfg, nn_at_setpoint })
    }

    pub fn config(&self) -> &OcpConfig {
        self.cfg
    }

    fn stage_cost(&self, x: &State, u: f64) -> Result<f64> {
        let dx = x.to_vector() - self.weights.x_d.to_vector();
        let du = u - self.weights.u_d.0;
        let quad = (dx.transpose() * self.weights.q * dx)[0] + self.weights.r * du * du;
        Ok(quad + nn_forward(x, self.theta, self.shape)? - self.nn_at_setpoint)
    }

    fn stage_grad_x(&self, x: &State) -> Result<Vector4<f64>> {
        let dx = x.to_vector() - self.weights.x_d.to_vector();
        let qsym = self.weights.q + self.weights.q.transpose();
        Ok(qsym * dx + nn_input_gradient(x, self.theta, self.shape)?)
    }

    fn stage_grad_u(&self, u: f64) -> f64 {
        2.0 * self.weights.r * (u - self.weights.u_d.0)
    }

    fn terminal_grad(&self, x: &State) -> Vector4<f64> {
        let dx = x.to_vector() - self.weights.x_d.to_vector();
        (self.weights.p + self.weights.p.transpose()) * dx
    }

    /// Simulate the prediction model along `u_seq` from `x_k` and accumulate
    /// stage plus terminal cost. Returns the cost and the predicted states.
    pub fn rollout_cost(&self, x_k: &State, u_seq: &[f64]) -> Result<(f64, Vec<State>)> {
        let n = u_seq.len();
        let mut x_pred = Vec::with_capacity(n + 1);
        x_pred.push(*x_k);
        let mut cost = 0.0;
        for &u in u_seq {
            let x = *x_pred.last().unwrap();
            cost += self.stage_cost(&x, u)?;
            x_pred.push(self.model.step(&x, Input(u))?);
        }
        cost += terminal_cost(x_pred.last().unwrap(), &self.weights.p, &self.weights.x_d);
        if cost.is_finite() {
            Ok((cost, x_pred))
        } else {
            Err(Error::NonFinite { context: "rollout_cost" })
        }
    }

    /// Gradient of the rollout cost with respect to the input sequence by a
    /// reverse (adjoint) sweep. Step-map Jacobians come from central finite
    /// differences, one pair per stage.
    pub fn rollout_gradient(&self, x_k: &State, u_seq: &[f64]) -> Result<Vec<f64>> {
        let n = u_seq.len();
        let (_, x_pred) = self.rollout_cost(x_k, u_seq)?;
        let mut grad = vec![0.0; n];
        let mut adjoint = self.terminal_grad(&x_pred[n]);
        for i in (0..n).rev() {
            let (a, b) = self.model.jacobians(&x_pred[i], Input(u_seq[i]))?;
            grad[i] = self.stage_grad_u(u_seq[i]) + b.dot(&adjoint);
            adjoint = self.stage_grad_x(&x_pred[i])? + a.transpose() * adjoint;
            if !adjoint.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { context: "rollout_gradient" });
            }
        }
        Ok(grad)
    }

    /// Solve the OCP from `x_k`, warm-starting from `warm` when provided and
    /// of matching length, otherwise from the constant set-point input.
    pub fn solve(&self, x_k: &State, warm: Option<&[f64]>) -> OcpSolution {
        let n = self.cfg.horizon;
        let start: Vec<f64> = match warm {
            Some(w) if w.len() == n => w.to_vec(),
            _ => vec![self.weights.u_d.0; n],
        };
        let lo = vec![self.cfg.u_min; n];
        let hi = vec![self.cfg.u_max; n];
        // the unstable dynamics make the reduced Hessian ill-conditioned;
        // full-horizon memory turns L-BFGS into an effectively dense update
        let opts = PqnOptions {
            tol: self.cfg.tol_kkt,
            max_iter: self.cfg.max_iter,
            memory: n,
            ..PqnOptions::default()
        };
        let result = pqn::minimize(
            |u| self.rollout_cost(x_k, u).ok().map(|(c, _)| c),
            |u| self.rollout_gradient(x_k, u).ok(),
            &start,
            &lo,
            &hi,
            &opts,
        );

        let status = match result.status {
            PqnStatus::Converged => SolverStatus::Converged,
            PqnStatus::MaxIter => SolverStatus::MaxIter,
            PqnStatus::Diverged => SolverStatus::Diverged,
        };
        if status == SolverStatus::Diverged {
            return OcpSolution {
                u_seq: result.x,
                x_pred: vec![],
                j_star: DIVERGED_COST,
                status,
                stationarity: result.grad_norm,
                cost_history: result.f_history,
            };
        }
        // the accepted iterate is always evaluable; re-derive the predicted
        // trajectory for the returned inputs
        match self.rollout_cost(x_k, &result.x) {
            Ok((j_star, x_pred)) => OcpSolution {
                u_seq: result.x,
                x_pred,
                j_star,
                status,
                stationarity: result.grad_norm,
                cost_history: result.f_history,
            },
            Err(_) => OcpSolution {
                u_seq: result.x,
                x_pred: vec![],
                j_star: DIVERGED_COST,
                status: SolverStatus::Diverged,
                stationarity: result.grad_norm,
                cost_history: result.f_history,
            },
        }
    }
}

/// Outcome of one receding-horizon policy evaluation.
#[derive(Debug, Clone)]
pub struct PolicyStep {
    /// First element of the optimal input sequence.
    pub input: Input,
    /// Optimal value J*(x_k).
    pub j_star: f64,
    /// Warm start for the next sampling instant.
    pub warm_next: Vec<f64>,
    pub solution: OcpSolution,
}

/// Solve the OCP at `x_k` and return the applied input, the optimal value and
/// the shifted warm start.
pub fn mpc_policy(ocp: &Ocp, x_k: &State, warm: Option<&[f64]>) -> PolicyStep {
    let warm = match ocp.cfg.warm_start {
        WarmStartPolicy::Shift => warm,
        WarmStartPolicy::Cold => None,
    };
    let solution = ocp.solve(x_k, warm);
    let input = Input(*solution.u_seq.first().unwrap_or(&ocp.weights.u_d.0));
    let mut warm_next = Vec::with_capacity(solution.u_seq.len());
    if !solution.u_seq.is_empty() {
        warm_next.extend_from_slice(&solution.u_seq[1..]);
        warm_next.push(*solution.u_seq.last().unwrap());
    }
    PolicyStep { input, j_star: solution.j_star, warm_next, solution }
}
