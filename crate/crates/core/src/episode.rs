//! Closed-loop episodes: run the plant under the MPC policy for M steps and
//! compute the scalar observations consumed by the Bayesian optimizer.
//!
//! Each episode yields a performance value `g0` (total weighted deviation
//! from the set-point) and two Lyapunov-style constraint values `g1`
//! (positivity of the optimal value function along the trajectory) and `g2`
//! (its decrease). Both constraints are nonpositive sums of pointwise
//! violations and equal zero exactly when no violation occurred.

use nalgebra::Matrix4;

use crate::cost::{CostWeights, NetworkShape};
use crate::dynamics::{DiscreteModel, Input, State};
use crate::error::{Error, Result};
use crate::mpc::{mpc_policy, Ocp, OcpConfig, SolverStatus};

/// Cap applied to the performance observation so GP targets stay finite.
pub const G0_CAP: f64 = 1e9;

/// Weights of the episode performance measure.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfWeights {
    pub v: Matrix4<f64>,
    pub w: f64,
    pub z: Matrix4<f64>,
}

/// Everything an episode needs besides the parameter vector.
pub struct EpisodeSetup<'a> {
    pub plant: &'a DiscreteModel,
    pub prediction: &'a DiscreteModel,
    pub weights: &'a CostWeights,
    pub perf: &'a PerfWeights,
    pub shape: &'a NetworkShape,
    pub ocp: &'a OcpConfig,
    /// Episode length M in steps.
    pub steps: usize,
    pub x0: State,
    /// Margin δ ≥ 0 subtracted inside the Lyapunov sums (0 = the plain
    /// non-strict forms).
    pub lyapunov_margin: f64,
}

/// Closed-loop record of one episode. A full episode holds M+1 states,
/// M inputs and M+1 optimal values (the last from an extra solve at the
/// final state); diverged episodes hold a consistent prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub inputs: Vec<f64>,
    pub jstar: Vec<f64>,
    pub status: Vec<SolverStatus>,
    pub ts: f64,
}

impl Trajectory {
    /// Optimal values at steps whose solve did not diverge (the prefix used
    /// for the constraint observations).
    pub fn valid_jstar(&self) -> &[f64] {
        let end = self
            .status
            .iter()
            .position(|s| *s == SolverStatus::Diverged)
            .unwrap_or(self.jstar.len());
        &self.jstar[..end]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub g0: f64,
    pub g1: f64,
    pub g2: f64,
    pub diverged: bool,
    pub trajectory: Trajectory,
}

/// Total weighted deviation from the set-point:
/// `Σ_{k=0}^{M} ‖x_k − x_d‖²_V + Σ_{k=0}^{M−1} ‖u_k − u_d‖²_W + ‖x_M − x_d‖²_Z`.
pub fn performance_g0(
    traj: &Trajectory,
    v: &Matrix4<f64>,
    w: f64,
    z: &Matrix4<f64>,
    x_d: &State,
    u_d: Input,
) -> f64 {
    let mut total = 0.0;
    for x in &traj.states {
        let dx = x.to_vector() - x_d.to_vector();
        total += (dx.transpose() * v * dx)[0];
    }
    for &u in &traj.inputs {
        let du = u - u_d.0;
        total += w * du * du;
    }
    if let Some(x_m) = traj.states.last() {
        let dx = x_m.to_vector() - x_d.to_vector();
        total += (dx.transpose() * z * dx)[0];
    }
    total
}

/// Positive-definiteness observation: `Σ_k min{0, J*(x_k) − δ}`.
pub fn lyapunov_g1(jstar: &[f64], margin: f64) -> f64 {
    jstar.iter().map(|j| (j - margin).min(0.0)).sum()
}

/// Decrease observation: `Σ_k min{0, −(J*(x_{k+1}) − J*(x_k)) − δ}`.
pub fn lyapunov_g2(jstar: &[f64], margin: f64) -> f64 {
    jstar
        .windows(2)
        .map(|w| (-(w[1] - w[0]) - margin).min(0.0))
        .sum()
}

/// Run one closed-loop episode of the plant under the MPC policy.
///
/// On solver or plant divergence the trajectory is truncated, the episode is
/// flagged, `g0` is set to [`G0_CAP`] and the constraints are computed on the
/// surviving prefix.
pub fn run_episode(theta: &[f64], setup: &EpisodeSetup) -> Result<EpisodeResult> {
    if setup.steps < 1 {
        return Err(Error::Precondition("episode length must be at least 1".into()));
    }
    if !setup.x0.is_finite() {
        return Err(Error::Precondition("initial state must be finite".into()));
    }
    if setup.lyapunov_margin < 0.0 {
        return Err(Error::Precondition("Lyapunov margin must be nonnegative".into()));
    }
    let ocp = Ocp::new(setup.prediction, theta, setup.weights, setup.shape, setup.ocp)?;

    let m = setup.steps;
    let mut traj = Trajectory {
        states: Vec::with_capacity(m + 1),
        inputs: Vec::with_capacity(m),
        jstar: Vec::with_capacity(m + 1),
        status: Vec::with_capacity(m + 1),
        ts: setup.plant.ts(),
    };
    traj.states.push(setup.x0);

    let mut diverged = false;
    let mut warm: Option<Vec<f64>> = None;
    for _ in 0..m {
        let x_k = *traj.states.last().unwrap();
        let step = mpc_policy(&ocp, &x_k, warm.as_deref());
        traj.jstar.push(step.j_star);
        traj.status.push(step.solution.status);
        if step.solution.status == SolverStatus::Diverged {
            diverged = true;
            break;
        }
        match setup.plant.step(&x_k, step.input) {
            Ok(next) => {
                traj.inputs.push(step.input.0);
                traj.states.push(next);
            }
            Err(_) => {
                diverged = true;
                break;
            }
        }
        warm = Some(step.warm_next);
    }

    if !diverged {
        // terminal solve at x_M for the k = M constraint term; no input applied
        let x_m = *traj.states.last().unwrap();
        let sol = ocp.solve(&x_m, warm.as_deref());
        traj.jstar.push(sol.j_star);
        traj.status.push(sol.status);
        if sol.status == SolverStatus::Diverged {
            diverged = true;
        }
    }

    let jstar_valid = traj.valid_jstar();
    let g1 = lyapunov_g1(jstar_valid, setup.lyapunov_margin);
    let g2 = lyapunov_g2(jstar_valid, setup.lyapunov_margin);
    let g0 = if diverged {
        G0_CAP
    } else {
        performance_g0(
            &traj,
            &setup.perf.v,
            setup.perf.w,
            &setup.perf.z,
            &setup.weights.x_d,
            setup.weights.u_d,
        )
        .min(G0_CAP)
    };

    Ok(EpisodeResult { g0, g1, g2, diverged, trajectory: traj })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::solve_dare;
    use crate::dynamics::{make_model, ModelVariant, PendulumParams, DEFAULT_TS};
    use crate::mpc::DIVERGED_COST;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, Matrix4, Vector4};

    fn weights_and_models() -> (CostWeights, PerfWeights, DiscreteModel, DiscreteModel) {
        let p = PendulumParams::nominal();
        let lin = crate::dynamics::linearize(&p, &State::upright(), Input(0.0), DEFAULT_TS).unwrap();
        let a = crate::cost::dmat4(&lin.a);
        let b = DMatrix::from_column_slice(4, 1, lin.b.as_slice());
        let q_mat = Matrix4::from_diagonal(&Vector4::new(10.0, 10.0, 0.1, 0.1));
        let q = crate::cost::dmat4(&q_mat);
        let r = DMatrix::from_element(1, 1, 0.01);
        let p_sol = solve_dare(&a, &b, &q, &r).unwrap();
        let mut p_mat = Matrix4::zeros();
        for i in 0..4 {
            for j in 0..4 {
                p_mat[(i, j)] = p_sol[(i, j)];
            }
        }
        let weights = CostWeights {
            q: q_mat,
            r: 0.01,
            p: p_mat,
            x_d: State::upright(),
            u_d: Input(0.0),
        };
        let perf = PerfWeights { v: q_mat, w: 0.01, z: p_mat };
        let plant = make_model(ModelVariant::True, &p, &p, DEFAULT_TS).unwrap();
        let prediction = make_model(ModelVariant::Linearized, &p, &p, DEFAULT_TS).unwrap();
        (weights, perf, plant, prediction)
    }

    #[test]
    fn g0_hand_case() {
        let traj = Trajectory {
            states: vec![
                State::new(1.0, 0.0, 0.0, 0.0), // deviation (1,0,0,0)
                State::new(0.0, 0.0, 0.0, 0.0), // at set-point
            ],
            inputs: vec![2.0],
            jstar: vec![0.0, 0.0],
            status: vec![SolverStatus::Converged; 2],
            ts: DEFAULT_TS,
        };
        let x_d = State::new(0.0, 0.0, 0.0, 0.0);
        let one = Matrix4::identity();
        let g0 = performance_g0(&traj, &one, 1.0, &one, &x_d, Input(0.0));
        assert_relative_eq!(g0, 5.0, epsilon = 1e-15);

        // doubling V doubles exactly the state-deviation contribution
        let doubled = performance_g0(&traj, &(2.0 * one), 1.0, &one, &x_d, Input(0.0));
        assert_relative_eq!(doubled - g0, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn g0_zero_at_setpoint() {
        let x_d = State::upright();
        let traj = Trajectory {
            states: vec![x_d; 5],
            inputs: vec![0.0; 4],
            jstar: vec![0.0; 5],
            status: vec![SolverStatus::Converged; 5],
            ts: DEFAULT_TS,
        };
        let one = Matrix4::identity();
        assert_eq!(performance_g0(&traj, &one, 1.0, &one, &x_d, Input(0.0)), 0.0);
    }

    #[test]
    fn g1_values() {
        assert_eq!(lyapunov_g1(&[1.0, 0.5, 2.0], 0.0), 0.0);
        assert_relative_eq!(lyapunov_g1(&[1.0, -0.5, 2.0, -0.25], 0.0), -0.75);
        assert_eq!(lyapunov_g1(&[0.0, 0.0, 0.0], 0.0), 0.0);
    }

    #[test]
    fn g2_values() {
        assert_eq!(lyapunov_g2(&[3.0, 2.0, 1.0], 0.0), 0.0);
        assert_relative_eq!(lyapunov_g2(&[1.0, 2.0, 1.5], 0.0), -1.0);
        // constant sequences do not violate the non-strict sum form
        assert_eq!(lyapunov_g2(&[1.0, 1.0, 1.0], 0.0), 0.0);
    }

    #[test]
    fn g1_is_order_independent() {
        let seq = [1.0, -0.5, 2.0, -0.25, 0.0];
        let mut permuted = seq;
        permuted.swap(1, 3);
        permuted.swap(0, 2);
        assert_eq!(lyapunov_g1(&seq, 0.0), lyapunov_g1(&permuted, 0.0));
    }

    #[test]
    fn episode_at_setpoint_is_identically_zero() {
        let (weights, perf, plant, prediction) = weights_and_models();
        let shape = NetworkShape::new(vec![4, 5, 1]);
        let ocp = OcpConfig::default();

        // linear plant: the set-point is an exact fixed point in floats
        let setup = EpisodeSetup {
            plant: &prediction,
            prediction: &prediction,
            weights: &weights,
            perf: &perf,
            shape: &shape,
            ocp: &ocp,
            steps: 10,
            x0: State::upright(),
            lyapunov_margin: 0.0,
        };
        let res = run_episode(&vec![0.0; 31], &setup).unwrap();
        assert!(!res.diverged);
        assert_eq!(res.g0, 0.0);
        assert_eq!(res.g1, 0.0);
        assert_eq!(res.g2, 0.0);
        assert_eq!(res.trajectory.states.len(), 11);
        assert_eq!(res.trajectory.inputs.len(), 10);
        assert_eq!(res.trajectory.jstar.len(), 11);

        // nonlinear plant: sin(π) is not exactly zero in f64, so the episode
        // holds the equilibrium only to machine residue, and the J* values
        // carry cancellation noise of the same order
        let setup = EpisodeSetup { plant: &plant, ..setup };
        let res = run_episode(&vec![0.0; 31], &setup).unwrap();
        assert!(!res.diverged);
        assert!(res.g0 <= 1e-24, "g0 = {}", res.g0);
        assert!(res.g1.abs() <= 1e-24, "g1 = {}", res.g1);
        assert!(res.g2.abs() <= 1e-24, "g2 = {}", res.g2);
        for x in &res.trajectory.states {
            assert!(x.max_abs_diff(&State::upright()) <= 1e-12);
        }
    }

    #[test]
    fn zero_theta_episode_is_bitwise_pure_quadratic() {
        // the 4-5-1 network with θ = 0 contributes exactly 0.0 everywhere, so
        // the episode must equal the one with the smallest possible zero
        // network bit for bit
        let (weights, perf, plant, prediction) = weights_and_models();
        let ocp = OcpConfig::default();
        let x0 = State::new(
            State::upright().psi1 - 0.3,
            State::upright().psi2 + 0.2,
            0.0,
            0.0,
        );
        let run = |shape: NetworkShape, theta: Vec<f64>| {
            let setup = EpisodeSetup {
                plant: &plant,
                prediction: &prediction,
                weights: &weights,
                perf: &perf,
                shape: &shape,
                ocp: &ocp,
                steps: 15,
                x0,
                lyapunov_margin: 0.0,
            };
            run_episode(&theta, &setup).unwrap()
        };
        let a = run(NetworkShape::new(vec![4, 5, 1]), vec![0.0; 31]);
        let b = run(NetworkShape::new(vec![4, 1]), vec![0.0; 5]);
        assert_eq!(a.g0.to_bits(), b.g0.to_bits());
        assert_eq!(a.g1.to_bits(), b.g1.to_bits());
        assert_eq!(a.g2.to_bits(), b.g2.to_bits());
        assert_eq!(a.trajectory.states, b.trajectory.states);
    }

    #[test]
    fn episode_replay_is_bit_exact() {
        let (weights, perf, plant, prediction) = weights_and_models();
        let shape = NetworkShape::new(vec![4, 5, 1]);
        let ocp = OcpConfig::default();
        let mut theta = vec![0.0; 31];
        theta[0] = 0.3;
        theta[7] = -0.8;
        theta[25] = 1.1;
        let setup = EpisodeSetup {
            plant: &plant,
            prediction: &prediction,
            weights: &weights,
            perf: &perf,
            shape: &shape,
            ocp: &ocp,
            steps: 12,
            x0: State::new(State::upright().psi1 - 0.4, State::upright().psi2 + 0.3, 0.0, 0.0),
            lyapunov_margin: 0.0,
        };
        let a = run_episode(&theta, &setup).unwrap();
        let b = run_episode(&theta, &setup).unwrap();
        assert_eq!(a.g0.to_bits(), b.g0.to_bits());
        assert_eq!(a.g1.to_bits(), b.g1.to_bits());
        assert_eq!(a.g2.to_bits(), b.g2.to_bits());
        assert_eq!(a.trajectory, b.trajectory);
    }

    #[test]
    fn constraints_are_nonpositive_along_any_episode() {
        let (weights, perf, plant, prediction) = weights_and_models();
        let shape = NetworkShape::new(vec![4, 5, 1]);
        let ocp = OcpConfig::default();
        let mut theta = vec![0.0; 31];
        // a deliberately hostile parameterization
        for (i, t) in theta.iter_mut().enumerate() {
            *t = if i % 2 == 0 { 2.5 } else { -2.5 };
        }
        let setup = EpisodeSetup {
            plant: &plant,
            prediction: &prediction,
            weights: &weights,
            perf: &perf,
            shape: &shape,
            ocp: &ocp,
            steps: 10,
            x0: State::new(State::upright().psi1 - 0.6, State::upright().psi2 + 0.4, 0.0, 0.0),
            lyapunov_margin: 0.0,
        };
        let res = run_episode(&theta, &setup).unwrap();
        assert!(res.g1 <= 0.0);
        assert!(res.g2 <= 0.0);
        assert!(res.g0 <= G0_CAP);
        assert!(res.g0.is_finite());
    }

    #[test]
    fn sentinel_jstar_excluded_from_constraints() {
        let traj = Trajectory {
            states: vec![State::upright(); 3],
            inputs: vec![0.0; 2],
            jstar: vec![1.0, 0.5, DIVERGED_COST],
            status: vec![
                SolverStatus::Converged,
                SolverStatus::Converged,
                SolverStatus::Diverged,
            ],
            ts: DEFAULT_TS,
        };
        assert_eq!(traj.valid_jstar(), &[1.0, 0.5]);
    }
}
