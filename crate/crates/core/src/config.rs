//! Experiment configuration: JSON schema, the two presets, validation and
//! compilation into runtime objects.
//!
//! A configuration is self-contained: the run log embeds a snapshot so that
//! exports and replays never consult live code defaults.

use nalgebra::{DMatrix, Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::bo::BoConfig;
use crate::cost::{count_params, solve_dare, CostWeights, NetworkShape};
use crate::dynamics::{
    linearize, make_model, DiscreteModel, Input, ModelVariant, PendulumParams, State, DEFAULT_TS,
};
use crate::episode::{run_episode, EpisodeResult, EpisodeSetup, PerfWeights};
use crate::error::{Error, Result};
use crate::gp::MaternNu;
use crate::mpc::OcpConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentTag {
    Unconstrained,
    Constrained,
    Custom,
}

/// Which model the MPC predicts with; `params` are the (possibly wrong)
/// estimates used by the `mismatched` variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionConfig {
    pub variant: ModelVariant,
    pub params: PendulumParams,
}

/// MPC cost weights plus optional performance-measure overrides. `v`, `w`,
/// `z` default to `Q`, `R` and the Riccati terminal weight respectively.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsConfig {
    pub q: [[f64; 4]; 4],
    pub r: f64,
    #[serde(default)]
    pub v: Option<[[f64; 4]; 4]>,
    #[serde(default)]
    pub w: Option<f64>,
    #[serde(default)]
    pub z: Option<[[f64; 4]; 4]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSettings {
    /// Closed-loop length M in steps.
    pub steps: usize,
    pub x0: [f64; 4],
    #[serde(default)]
    pub lyapunov_margin: f64,
}

/// BO settings; the parameter dimension is derived from the network shape
/// and the seed lives at the top level of the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoSettings {
    pub budget: usize,
    pub n_init: usize,
    pub include_nominal: bool,
    pub box_halfwidth: f64,
    pub epsilon: f64,
    pub kappa: f64,
    pub constrained: bool,
    pub candidates: usize,
    pub refine_top: usize,
    pub refine_steps: usize,
    pub fit_restarts: usize,
    pub nu: MaternNu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentTag,
    pub plant: PendulumParams,
    pub prediction: PredictionConfig,
    pub ts: f64,
    /// Network layer sizes, input to output.
    pub network: Vec<usize>,
    pub weights: WeightsConfig,
    pub ocp: OcpConfig,
    pub episode: EpisodeSettings,
    pub bo: BoSettings,
    pub seed: u64,
}

fn diag4(d: [f64; 4]) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        m[i][i] = d[i];
    }
    m
}

fn to_matrix(m: &[[f64; 4]; 4]) -> Matrix4<f64> {
    Matrix4::from_fn(|i, j| m[i][j])
}

impl ExperimentConfig {
    /// Set-point change with a linearized prediction model and a 4-5-1
    /// network, plain expected improvement.
    pub fn unconstrained() -> Self {
        Self {
            experiment: ExperimentTag::Unconstrained,
            plant: PendulumParams::nominal(),
            prediction: PredictionConfig {
                variant: ModelVariant::Linearized,
                params: PendulumParams::nominal(),
            },
            ts: DEFAULT_TS,
            network: vec![4, 5, 1],
            weights: WeightsConfig {
                q: diag4([10.0, 10.0, 0.1, 0.1]),
                r: 0.01,
                v: None,
                w: None,
                z: None,
            },
            ocp: OcpConfig::default(),
            episode: EpisodeSettings {
                steps: 50,
                x0: [PI - 0.6, PI + 0.4, 0.0, 0.0],
                lyapunov_margin: 0.0,
            },
            bo: BoSettings {
                budget: 400,
                n_init: 10,
                include_nominal: true,
                box_halfwidth: 3.0,
                epsilon: 0.0,
                kappa: 1000.0,
                constrained: false,
                candidates: 1024,
                refine_top: 8,
                refine_steps: 32,
                fit_restarts: 8,
                nu: MaternNu::FiveHalves,
            },
            seed: 0,
        }
    }

    /// Parameter-mismatched prediction model, 4-10-1 network and the
    /// Lyapunov observations as soft constraints.
    pub fn constrained() -> Self {
        let mut cfg = Self::unconstrained();
        cfg.experiment = ExperimentTag::Constrained;
        cfg.prediction = PredictionConfig {
            variant: ModelVariant::Mismatched,
            params: PendulumParams::mismatched(),
        };
        cfg.network = vec![4, 10, 1];
        cfg.bo.budget = 300;
        cfg.bo.epsilon = 1.0;
        cfg.bo.constrained = true;
        cfg.bo.include_nominal = false;
        cfg
    }

    pub fn preset(tag: ExperimentTag) -> Self {
        match tag {
            ExperimentTag::Unconstrained => Self::unconstrained(),
            ExperimentTag::Constrained => Self::constrained(),
            ExperimentTag::Custom => {
                let mut cfg = Self::unconstrained();
                cfg.experiment = ExperimentTag::Custom;
                cfg
            }
        }
    }

    pub fn shape(&self) -> NetworkShape {
        NetworkShape::new(self.network.clone())
    }

    pub fn n_params(&self) -> usize {
        count_params(&self.shape())
    }

    pub fn bo_config(&self) -> BoConfig {
        BoConfig {
            dim: self.n_params(),
            budget: self.bo.budget,
            n_init: self.bo.n_init,
            include_nominal: self.bo.include_nominal,
            box_halfwidth: self.bo.box_halfwidth,
            epsilon: self.bo.epsilon,
            kappa: self.bo.kappa,
            constrained: self.bo.constrained,
            candidates: self.bo.candidates,
            refine_top: self.bo.refine_top,
            refine_steps: self.bo.refine_steps,
            fit_restarts: self.bo.fit_restarts,
            nu: self.bo.nu,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.prediction.params.validate()?;
        if !(self.ts > 0.0) {
            return Err(Error::Config("sampling period must be positive".into()));
        }
        self.shape().validate()?;
        if !(self.weights.r > 0.0) {
            return Err(Error::Config("input weight R must be positive".into()));
        }
        self.ocp.validate()?;
        if self.episode.steps < 1 {
            return Err(Error::Config("episode length must be at least 1".into()));
        }
        if self.episode.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("initial state must be finite".into()));
        }
        if self.episode.lyapunov_margin < 0.0 {
            return Err(Error::Config("Lyapunov margin must be nonnegative".into()));
        }
        self.bo_config().validate()?;

        match self.experiment {
            ExperimentTag::Unconstrained => {
                let ok = self.prediction.variant == ModelVariant::Linearized
                    && self.network == [4, 5, 1]
                    && self.bo.budget == 400
                    && self.bo.epsilon == 0.0;
                if !ok {
                    return Err(Error::Config(
                        "unconstrained preset requires linearized prediction model, 4-5-1 network, \
                         budget 400 and epsilon 0; use experiment = custom for variants"
                            .into(),
                    ));
                }
            }
            ExperimentTag::Constrained => {
                let ok = self.prediction.variant == ModelVariant::Mismatched
                    && self.prediction.params == PendulumParams::mismatched()
                    && self.network == [4, 10, 1]
                    && self.bo.budget == 300
                    && self.bo.epsilon == 1.0
                    && self.bo.constrained;
                if !ok {
                    return Err(Error::Config(
                        "constrained preset requires the mismatched prediction model \
                         (l=1.2, m1=2, m2=0.5), 4-10-1 network, budget 300 and epsilon 1; \
                         use experiment = custom for variants"
                            .into(),
                    ));
                }
            }
            ExperimentTag::Custom => {}
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }
}

/// Runtime objects compiled from a configuration: models, cost weights with
/// the Riccati terminal matrix, and the performance weights.
#[derive(Debug, Clone)]
pub struct CompiledExperiment {
    pub config: ExperimentConfig,
    pub plant: DiscreteModel,
    pub prediction: DiscreteModel,
    pub weights: CostWeights,
    pub perf: PerfWeights,
    pub shape: NetworkShape,
}

impl CompiledExperiment {
    /// Build models and weights. The terminal weight is the DARE solution for
    /// the prediction model linearized at the set-point with the configured
    /// `(Q, R)`.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let x_d = State::upright();
        let u_d = Input(0.0);
        let plant = make_model(ModelVariant::True, &config.plant, &config.prediction.params, config.ts)?;
        let prediction = make_model(
            config.prediction.variant,
            &config.plant,
            &config.prediction.params,
            config.ts,
        )?;

        // linearize whatever model the MPC predicts with
        let lin_params = match config.prediction.variant {
            ModelVariant::Mismatched => config.prediction.params,
            _ => config.plant,
        };
        let lin = linearize(&lin_params, &x_d, u_d, config.ts)?;

        let q = to_matrix(&config.weights.q);
        let a = crate::cost::dmat4(&lin.a);
        let b = DMatrix::from_column_slice(4, 1, lin.b.as_slice());
        let qd = crate::cost::dmat4(&q);
        let rd = DMatrix::from_element(1, 1, config.weights.r);
        let p_sol = solve_dare(&a, &b, &qd, &rd)?;
        let p = Matrix4::from_fn(|i, j| p_sol[(i, j)]);

        let weights = CostWeights { q, r: config.weights.r, p, x_d, u_d };
        weights.validate()?;
        let perf = PerfWeights {
            v: config.weights.v.as_ref().map_or(q, to_matrix),
            w: config.weights.w.unwrap_or(config.weights.r),
            z: config.weights.z.as_ref().map_or(p, to_matrix),
        };
        let shape = config.shape();
        Ok(Self { config, plant, prediction, weights, perf, shape })
    }

    pub fn x0(&self) -> State {
        State::from_array(self.config.episode.x0)
    }

    pub fn episode_setup(&self) -> EpisodeSetup<'_> {
        EpisodeSetup {
            plant: &self.plant,
            prediction: &self.prediction,
            weights: &self.weights,
            perf: &self.perf,
            shape: &self.shape,
            ocp: &self.config.ocp,
            steps: self.config.episode.steps,
            x0: self.x0(),
            lyapunov_margin: self.config.episode.lyapunov_margin,
        }
    }

    /// One closed-loop episode at `theta` under this experiment.
    pub fn run_episode(&self, theta: &[f64]) -> Result<EpisodeResult> {
        run_episode(theta, &self.episode_setup())
    }

    pub fn n_params(&self) -> usize {
        count_params(&self.shape)
    }
}

/// Default-weight helper used by tests and docs: `Q = diag(10, 10, 0.1, 0.1)`.
pub fn default_q() -> Matrix4<f64> {
    Matrix4::from_diagonal(&Vector4::new(10.0, 10.0, 0.1, 0.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_pin_paper_values() {
        let u = ExperimentConfig::unconstrained();
        assert_eq!(u.ts, 0.05);
        assert_eq!(u.ocp.u_min, -50.0);
        assert_eq!(u.ocp.u_max, 50.0);
        assert_eq!(u.network, vec![4, 5, 1]);
        assert_eq!(u.n_params(), 31);
        assert_eq!(u.episode.steps, 50);
        assert_eq!(u.bo.budget, 400);
        assert_eq!(u.bo.epsilon, 0.0);
        assert_eq!(u.plant, PendulumParams::nominal());
        assert_eq!(u.prediction.variant, ModelVariant::Linearized);
        u.validate().unwrap();

        let c = ExperimentConfig::constrained();
        assert_eq!(c.network, vec![4, 10, 1]);
        assert_eq!(c.n_params(), 61);
        assert_eq!(c.bo.budget, 300);
        assert_eq!(c.bo.epsilon, 1.0);
        assert_eq!(c.bo.kappa, 1000.0);
        assert_eq!(c.prediction.variant, ModelVariant::Mismatched);
        assert_eq!(c.prediction.params.l1, 1.2);
        assert_eq!(c.prediction.params.l2, 1.2);
        assert_eq!(c.prediction.params.m1, 2.0);
        assert_eq!(c.prediction.params.m2, 0.5);
        c.validate().unwrap();
    }

    #[test]
    fn config_roundtrips_through_json() {
        for cfg in [ExperimentConfig::unconstrained(), ExperimentConfig::constrained()] {
            let json = cfg.to_json_pretty();
            let parsed = ExperimentConfig::from_json(&json).unwrap();
            assert_eq!(parsed, cfg);
            // a second round trip is byte-identical
            assert_eq!(parsed.to_json_pretty(), json);
        }
    }

    #[test]
    fn modified_preset_must_be_custom() {
        let mut cfg = ExperimentConfig::unconstrained();
        cfg.bo.budget = 60;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.experiment = ExperimentTag::Custom;
        cfg.validate().unwrap();
    }

    #[test]
    fn compile_builds_riccati_terminal_weight() {
        let mut cfg = ExperimentConfig::unconstrained();
        cfg.experiment = ExperimentTag::Custom;
        cfg.bo.budget = 1;
        let compiled = CompiledExperiment::new(cfg).unwrap();
        // P solves the DARE of the linearized prediction model
        let lin = linearize(
            &PendulumParams::nominal(),
            &State::upright(),
            Input(0.0),
            DEFAULT_TS,
        )
        .unwrap();
        let a = crate::cost::dmat4(&lin.a);
        let b = DMatrix::from_column_slice(4, 1, lin.b.as_slice());
        let qd = crate::cost::dmat4(&compiled.weights.q);
        let rd = DMatrix::from_element(1, 1, compiled.weights.r);
        let p = crate::cost::dmat4(&compiled.weights.p);
        assert!(crate::cost::dare_residual(&a, &b, &qd, &rd, &p) < 1e-8);
        // performance weights default to (Q, R, P)
        assert_eq!(compiled.perf.v, compiled.weights.q);
        assert_eq!(compiled.perf.w, compiled.weights.r);
        assert_eq!(compiled.perf.z, compiled.weights.p);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ExperimentConfig::preset(ExperimentTag::Custom);
        cfg.ts = -1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::preset(ExperimentTag::Custom);
        cfg.network = vec![3, 5, 1];
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::preset(ExperimentTag::Custom);
        cfg.ocp.u_min = 60.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::preset(ExperimentTag::Custom);
        cfg.bo.n_init = 1;
        assert!(cfg.validate().is_err());
    }
}
