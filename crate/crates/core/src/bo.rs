//! Constrained Bayesian optimization of the controller parameters:
//! expected-improvement acquisition, softplus constraint penalty, acquisition
//! search over the parameter box, and the query/refit loop.
//!
//! The loop minimizes the episode performance `g0` subject to the two
//! Lyapunov observations being zero. Constraints enter the acquisition as a
//! soft penalty `β(θ) = −Σ log(exp(−κ μ_i(θ)) + 1)` on the constraint GPs'
//! posterior means, so predicted-infeasible regions are discouraged but never
//! forbidden. Expected improvement is computed on standardized targets; the
//! penalty on raw (observation-unit) means.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{fit_hyperparameters, Dataset, GpModel, KernelSpec, MaternNu, NOISE_FLOOR};

/// Stream identifiers of the master-seed split; see [`BoConfig::seed`].
const STREAM_INIT_DESIGN: u64 = 0;
const STREAM_ACQUISITION: u64 = 1;
const STREAM_HYPER_FIT: u64 = 2;

/// Budgets, parameter box, penalty and acquisition-search settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoConfig {
    /// Dimension of the parameter vector.
    pub dim: usize,
    /// Number of BO iterations after the initial design.
    pub budget: usize,
    /// Random initial-design size.
    pub n_init: usize,
    /// Also evaluate θ = 0 as part of the initial design.
    pub include_nominal: bool,
    /// Half-width c of the box Θ = [−c, c]^dim.
    pub box_halfwidth: f64,
    /// Penalty weight ε ≥ 0 (0 disables the penalty).
    pub epsilon: f64,
    /// Penalty sharpness κ > 0.
    pub kappa: f64,
    /// Whether the incumbent must satisfy g1 = g2 = 0.
    pub constrained: bool,
    /// Uniform candidates drawn per acquisition search.
    pub candidates: usize,
    /// Candidates kept for local refinement.
    pub refine_top: usize,
    /// Pattern-search sweeps per refined candidate.
    pub refine_steps: usize,
    /// Random restarts per GP hyperparameter fit.
    pub fit_restarts: usize,
    pub nu: MaternNu,
    /// Master seed; split into independent init-design, acquisition and
    /// hyperparameter-fit streams.
    pub seed: u64,
}

impl BoConfig {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            budget: 50,
            n_init: 10,
            include_nominal: false,
            box_halfwidth: 3.0,
            epsilon: 1.0,
            kappa: 1000.0,
            constrained: true,
            candidates: 1024,
            refine_top: 8,
            refine_steps: 32,
            fit_restarts: 8,
            nu: MaternNu::FiveHalves,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("BO dimension must be positive".into()));
        }
        if self.n_init < 2 {
            return Err(Error::Config("initial design needs at least 2 points".into()));
        }
        if !(self.box_halfwidth > 0.0) {
            return Err(Error::Config("parameter box half-width must be positive".into()));
        }
        if self.epsilon < 0.0 {
            return Err(Error::Config("penalty weight must be nonnegative".into()));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::Config("penalty sharpness must be positive".into()));
        }
        if self.candidates == 0 || self.refine_top == 0 {
            return Err(Error::Config("acquisition search needs candidates".into()));
        }
        Ok(())
    }
}

/// Scalar observations of one closed-loop episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub g0: f64,
    pub g1: f64,
    pub g2: f64,
    pub diverged: bool,
}

/// One evaluated query point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub theta: Vec<f64>,
    pub g0: f64,
    pub g1: f64,
    pub g2: f64,
    pub diverged: bool,
}

impl Query {
    pub fn feasible(&self) -> bool {
        self.g1 == 0.0 && self.g2 == 0.0
    }
}

/// Kernel and noise of one surrogate model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub kernel: KernelSpec,
    pub noise_variance: f64,
}

/// Mutable state of the BO loop: history, surrogates and incumbent.
#[derive(Debug, Clone)]
pub struct BoState {
    pub history: Vec<Query>,
    pub gp_g0: Option<GpModel>,
    pub gp_g1: Option<GpModel>,
    pub gp_g2: Option<GpModel>,
    /// Index of the incumbent query in `history`.
    pub incumbent: Option<usize>,
    hyper: Option<[GpHyper; 3]>,
    rng_acq: ChaCha8Rng,
    rng_hyper: ChaCha8Rng,
}

impl BoState {
    pub fn new(cfg: &BoConfig) -> Self {
        let mut rng_acq = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng_acq.set_stream(STREAM_ACQUISITION);
        let mut rng_hyper = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng_hyper.set_stream(STREAM_HYPER_FIT);
        Self {
            history: Vec::new(),
            gp_g0: None,
            gp_g1: None,
            gp_g2: None,
            incumbent: None,
            hyper: None,
            rng_acq,
            rng_hyper,
        }
    }

    /// Current GP hyperparameters (g0, g1, g2), once fitted.
    pub fn hyperparameters(&self) -> Option<&[GpHyper; 3]> {
        self.hyper.as_ref()
    }

    pub fn incumbent_query(&self) -> Option<&Query> {
        self.incumbent.map(|i| &self.history[i])
    }

    fn update_incumbent(&mut self, constrained: bool) {
        self.incumbent = pick_incumbent(&self.history, constrained);
    }

    /// Refit all three surrogates on the full history, including
    /// hyperparameter optimization warm-started from the previous values.
    pub fn refit_gps(&mut self, cfg: &BoConfig) -> Result<()> {
        let inputs: Vec<Vec<f64>> = self.history.iter().map(|q| q.theta.clone()).collect();
        let targets = [
            self.history.iter().map(|q| q.g0).collect::<Vec<_>>(),
            self.history.iter().map(|q| q.g1).collect::<Vec<_>>(),
            self.history.iter().map(|q| q.g2).collect::<Vec<_>>(),
        ];
        let prev = self.hyper.take();
        let mut new_hyper = Vec::with_capacity(3);
        let mut models = Vec::with_capacity(3);
        for (i, target) in targets.iter().enumerate() {
            let data = Dataset { inputs: inputs.clone(), targets: target.clone() };
            let (template, noise0) = match &prev {
                Some(h) => (h[i].kernel.clone(), h[i].noise_variance),
                None => (KernelSpec::unit(cfg.nu, cfg.dim), 1e-4),
            };
            let (kernel, noise, _report) =
                fit_hyperparameters(&data, &template, noise0, cfg.fit_restarts, &mut self.rng_hyper);
            let model = match GpModel::fit(&data, kernel.clone(), noise) {
                Ok(m) => m,
                Err(e) => {
                    // fall back to the template so the loop can continue
                    log::warn!("GP refit failed ({e}); retrying with previous hyperparameters");
                    GpModel::fit(&data, template.clone(), noise0.max(NOISE_FLOOR))?
                }
            };
            new_hyper.push(GpHyper {
                kernel: model.kernel().clone(),
                noise_variance: model.noise_variance(),
            });
            models.push(model);
        }
        self.hyper = Some([
            new_hyper[0].clone(),
            new_hyper[1].clone(),
            new_hyper[2].clone(),
        ]);
        let mut it = models.into_iter();
        self.gp_g0 = it.next();
        self.gp_g1 = it.next();
        self.gp_g2 = it.next();
        Ok(())
    }
}

/// Incumbent rule: best feasible `g0` in constrained mode, best `g0`
/// otherwise; with no feasible query yet, least total violation broken by
/// lower `g0`. Earlier queries win exact ties.
fn pick_incumbent(history: &[Query], constrained: bool) -> Option<usize> {
    if history.is_empty() {
        return None;
    }
    if !constrained {
        let mut best = 0;
        for (i, q) in history.iter().enumerate() {
            if q.g0 < history[best].g0 {
                best = i;
            }
        }
        return Some(best);
    }
    let mut best_feasible: Option<usize> = None;
    for (i, q) in history.iter().enumerate() {
        if q.feasible() && best_feasible.is_none_or(|b| q.g0 < history[b].g0) {
            best_feasible = Some(i);
        }
    }
    if best_feasible.is_some() {
        return best_feasible;
    }
    let violation = |q: &Query| -(q.g1 + q.g2);
    let mut best = 0;
    for (i, q) in history.iter().enumerate() {
        let (v, b) = (violation(q), violation(&history[best]));
        if v < b || (v == b && q.g0 < history[best].g0) {
            best = i;
        }
    }
    Some(best)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Closed-form expected improvement for minimization: with Δ = incumbent − μ,
/// `EI = Δ Φ(Δ/s) + s φ(Δ/s)` for s > 0 and `max(Δ, 0)` at s = 0.
pub fn ei_value(mean: f64, std: f64, incumbent: f64) -> f64 {
    let delta = incumbent - mean;
    if std <= 0.0 {
        return delta.max(0.0);
    }
    let z = delta / std;
    (delta * normal_cdf(z) + std * normal_pdf(z)).max(0.0)
}

/// Expected improvement of a query point under the objective GP, evaluated on
/// standardized targets.
pub fn expected_improvement(theta: &[f64], gp: &GpModel, incumbent_value: f64) -> f64 {
    let (mean, var) = gp.posterior_standardized(theta);
    ei_value(mean, var.sqrt(), gp.standardize_target(incumbent_value))
}

/// Numerically safe `log(exp(a) + 1)`.
fn softplus(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

/// Soft-constraint penalty `β = −Σ log(exp(−κ μ_i) + 1)` from the constraint
/// posterior means. Nonpositive everywhere; → 0 as all means → +∞.
pub fn penalty_from_means(means: &[f64], kappa: f64) -> f64 {
    -means.iter().map(|m| softplus(-kappa * m)).sum::<f64>()
}

/// Penalty of a query point from the two constraint GPs' posterior means in
/// observation units.
pub fn penalty_beta(theta: &[f64], gp_g1: &GpModel, gp_g2: &GpModel, kappa: f64) -> f64 {
    let (m1, _) = gp_g1.posterior(theta);
    let (m2, _) = gp_g2.posterior(theta);
    penalty_from_means(&[m1, m2], kappa)
}

/// A proposed query point with acquisition diagnostics.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub theta: Vec<f64>,
    /// Acquisition value at the proposal.
    pub acquisition: f64,
    /// Best acquisition value among the raw uniform candidates.
    pub best_candidate_acquisition: f64,
}

/// Maximize `EI(θ) + ε β(θ)` over the box: seeded uniform candidates, then
/// coordinate-wise pattern search from the best few, deterministic given the
/// acquisition stream and the data.
pub fn propose_next(state: &mut BoState, cfg: &BoConfig) -> Result<Proposal> {
    let gp0 = state
        .gp_g0
        .as_ref()
        .ok_or_else(|| Error::Precondition("propose_next requires fitted GPs".into()))?;
    let incumbent_value = state
        .incumbent_query()
        .map(|q| q.g0)
        .ok_or_else(|| Error::Precondition("propose_next requires an incumbent".into()))?;
    let (gp1, gp2) = (state.gp_g1.as_ref(), state.gp_g2.as_ref());
    if cfg.epsilon > 0.0 && (gp1.is_none() || gp2.is_none()) {
        return Err(Error::Precondition("penalty requires fitted constraint GPs".into()));
    }

    let c = cfg.box_halfwidth;
    let acq = |theta: &[f64]| -> f64 {
        let mut a = expected_improvement(theta, gp0, incumbent_value);
        if cfg.epsilon > 0.0 {
            a += cfg.epsilon * penalty_beta(theta, gp1.unwrap(), gp2.unwrap(), cfg.kappa);
        }
        if a.is_nan() {
            f64::NEG_INFINITY
        } else {
            a
        }
    };

    let mut candidates: Vec<Vec<f64>> = Vec::with_capacity(cfg.candidates);
    for _ in 0..cfg.candidates {
        candidates.push((0..cfg.dim).map(|_| state.rng_acq.random_range(-c..c)).collect());
    }
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, theta)| (acq(theta), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    let best_candidate_acquisition = scored[0].0;

    let mut best_theta = candidates[scored[0].1].clone();
    let mut best_acq = best_candidate_acquisition;
    for &(start_acq, idx) in scored.iter().take(cfg.refine_top.min(scored.len())) {
        let mut theta = candidates[idx].clone();
        let mut value = start_acq;
        let mut step = 0.1 * c;
        for _ in 0..cfg.refine_steps {
            let mut improved = false;
            for d in 0..cfg.dim {
                let original = theta[d];
                let mut local_best = value;
                let mut local_coord = original;
                for dir in [1.0, -1.0] {
                    let cand = (original + dir * step).clamp(-c, c);
                    if cand != original {
                        theta[d] = cand;
                        let v = acq(&theta);
                        if v > local_best {
                            local_best = v;
                            local_coord = cand;
                        }
                    }
                }
                theta[d] = local_coord;
                if local_best > value {
                    value = local_best;
                    improved = true;
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if value > best_acq {
            best_acq = value;
            best_theta = theta;
        }
    }

    for t in best_theta.iter_mut() {
        *t = t.clamp(-c, c);
    }
    Ok(Proposal {
        theta: best_theta,
        acquisition: best_acq,
        best_candidate_acquisition,
    })
}

/// One BO iteration: propose, evaluate one episode, append, refit, update the
/// incumbent. Episode divergence is recorded, not fatal.
pub fn bo_step<F>(state: &mut BoState, cfg: &BoConfig, runner: &mut F) -> Result<()>
where
    F: FnMut(&[f64]) -> Result<Observation>,
{
    let proposal = propose_next(state, cfg)?;
    let obs = runner(&proposal.theta)?;
    state.history.push(Query {
        theta: proposal.theta,
        g0: obs.g0,
        g1: obs.g1,
        g2: obs.g2,
        diverged: obs.diverged,
    });
    state.refit_gps(cfg)?;
    state.update_incumbent(cfg.constrained);
    Ok(())
}

/// Full BO run: initial design (uniform draws, optionally preceded by θ = 0),
/// one GP fit, then `budget` iterations of [`bo_step`]. The observer runs
/// after every appended query.
pub fn run_bo<F, O>(cfg: &BoConfig, runner: &mut F, mut observer: O) -> Result<BoState>
where
    F: FnMut(&[f64]) -> Result<Observation>,
    O: FnMut(&BoState, usize),
{
    cfg.validate()?;
    let mut state = BoState::new(cfg);
    let mut rng_init = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_init.set_stream(STREAM_INIT_DESIGN);

    let mut init_points: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_init + 1);
    if cfg.include_nominal {
        init_points.push(vec![0.0; cfg.dim]);
    }
    let c = cfg.box_halfwidth;
    for _ in 0..cfg.n_init {
        init_points.push((0..cfg.dim).map(|_| rng_init.random_range(-c..c)).collect());
    }

    for theta in init_points {
        let obs = runner(&theta)?;
        state.history.push(Query {
            theta,
            g0: obs.g0,
            g1: obs.g1,
            g2: obs.g2,
            diverged: obs.diverged,
        });
        state.update_incumbent(cfg.constrained);
        observer(&state, state.history.len() - 1);
    }

    state.refit_gps(cfg)?;

    for _ in 0..cfg.budget {
        bo_step(&mut state, cfg, runner)?;
        observer(&state, state.history.len() - 1);
    }
    Ok(state)
}
