//! Orchestration of the tuning experiments: single-episode simulation, the
//! full BO run with a JSON-lines log, and plot-data export.
//!
//! File formats:
//! * run log — JSON lines; a header line with the config snapshot, one line
//!   per query, and a final incumbent summary. Partial logs are valid
//!   prefixes.
//! * trajectories — RFC-4180 CSV with columns
//!   `k,t,psi1,psi2,dpsi1,dpsi2,u,jstar,status` (`u` is empty on the final
//!   row, where no input is applied).
//! * incumbent parameters — a plain JSON array, readable by `--theta-file`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bo::{run_bo, GpHyper, Observation, Query};
use crate::config::{CompiledExperiment, ExperimentConfig};
use crate::episode::{EpisodeResult, Trajectory};
use crate::error::{Error, Result};

pub const RUN_LOG_VERSION: u32 = 1;
pub const RUN_LOG_FILE: &str = "runlog.jsonl";
pub const INCUMBENT_THETA_FILE: &str = "incumbent_theta.json";

/// Where a simulation gets its parameter vector from.
#[derive(Debug, Clone)]
pub enum ThetaSource {
    /// The nominal controller θ = 0.
    Zero,
    /// A JSON array file.
    File(PathBuf),
    /// The incumbent recorded in a run log.
    IncumbentOf(PathBuf),
}

/// One line of the run log.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunLogLine {
    Header {
        version: u32,
        config: Box<ExperimentConfig>,
    },
    Iteration(IterationRecord),
    Incumbent(IncumbentRecord),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Query index, initial design included.
    pub n: usize,
    pub theta: Vec<f64>,
    pub g0: f64,
    pub g1: f64,
    pub g2: f64,
    pub diverged: bool,
    /// Objective value of the incumbent after this query.
    pub incumbent_value: f64,
    /// Hyperparameters of the (g0, g1, g2) surrogates after the refit;
    /// absent for initial-design queries, which precede the first fit.
    pub gp_hyperparameters: Option<[GpHyper; 3]>,
    /// Seconds since the start of the run.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncumbentRecord {
    /// Index of the incumbent query.
    pub n: usize,
    pub theta: Vec<f64>,
    pub g0: f64,
    pub g1: f64,
    pub g2: f64,
    pub feasible: bool,
}

/// Parsed run log.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub config: ExperimentConfig,
    pub iterations: Vec<IterationRecord>,
    pub incumbent: Option<IncumbentRecord>,
}

pub fn read_run_log(path: &Path) -> Result<RunLog> {
    let file = File::open(path)?;
    let mut config = None;
    let mut iterations = Vec::new();
    let mut incumbent = None;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RunLogLine = serde_json::from_str(&line).map_err(|e| {
            Error::Config(format!("corrupt run log at line {}: {e}", lineno + 1))
        })?;
        match parsed {
            RunLogLine::Header { version, config: c } => {
                if version != RUN_LOG_VERSION {
                    return Err(Error::Config(format!(
                        "unsupported run log version {version} (expected {RUN_LOG_VERSION})"
                    )));
                }
                config = Some(*c);
            }
            RunLogLine::Iteration(rec) => iterations.push(rec),
            RunLogLine::Incumbent(rec) => incumbent = Some(rec),
        }
    }
    let config = config.ok_or_else(|| Error::Config("run log has no header line".into()))?;
    Ok(RunLog { config, iterations, incumbent })
}

/// Resolve a parameter vector and check its length against the experiment.
pub fn resolve_theta(source: &ThetaSource, n_params: usize) -> Result<Vec<f64>> {
    let theta = match source {
        ThetaSource::Zero => vec![0.0; n_params],
        ThetaSource::File(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str::<Vec<f64>>(&text)
                .map_err(|e| Error::Config(format!("theta file {}: {e}", path.display())))?
        }
        ThetaSource::IncumbentOf(log_path) => {
            let log = read_run_log(log_path)?;
            log.incumbent
                .ok_or_else(|| {
                    Error::Config(format!(
                        "run log {} has no incumbent record",
                        log_path.display()
                    ))
                })?
                .theta
        }
    };
    if theta.len() != n_params {
        return Err(Error::Dimension {
            context: "theta",
            expected: n_params,
            actual: theta.len(),
        });
    }
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::Config("theta contains non-finite entries".into()));
    }
    Ok(theta)
}

fn write_csv_row(
    out: &mut impl Write,
    prefix: Option<usize>,
    k: usize,
    traj: &Trajectory,
) -> std::io::Result<()> {
    let x = &traj.states[k];
    let t = k as f64 * traj.ts;
    if let Some(n) = prefix {
        write!(out, "{n},")?;
    }
    write!(out, "{k},{t},{},{},{},{}", x.psi1, x.psi2, x.dpsi1, x.dpsi2)?;
    if k < traj.inputs.len() {
        write!(out, ",{}", traj.inputs[k])?;
    } else {
        write!(out, ",")?;
    }
    if k < traj.jstar.len() {
        write!(out, ",{}", traj.jstar[k])?;
    } else {
        write!(out, ",")?;
    }
    if k < traj.status.len() {
        writeln!(out, ",{}", traj.status[k])
    } else {
        writeln!(out, ",")
    }
}

/// Write one trajectory as CSV.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "k,t,psi1,psi2,dpsi1,dpsi2,u,jstar,status")?;
    for k in 0..traj.states.len() {
        write_csv_row(&mut out, None, k, traj)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub g0: f64,
    pub g1: f64,
    pub g2: f64,
    pub diverged: bool,
    pub trajectory_csv: PathBuf,
}

/// Run one episode at the resolved θ and write its trajectory CSV into
/// `out_dir`.
pub fn cmd_simulate(
    config: &ExperimentConfig,
    source: &ThetaSource,
    out_dir: &Path,
) -> Result<SimulateSummary> {
    let compiled = CompiledExperiment::new(config.clone())?;
    let theta = resolve_theta(source, compiled.n_params())?;
    let result = compiled.run_episode(&theta)?;
    fs::create_dir_all(out_dir)?;
    let csv_path = out_dir.join("trajectory.csv");
    write_trajectory_csv(&csv_path, &result.trajectory)?;
    Ok(SimulateSummary {
        g0: result.g0,
        g1: result.g1,
        g2: result.g2,
        diverged: result.diverged,
        trajectory_csv: csv_path,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TuneSummary {
    pub queries: usize,
    pub incumbent: IncumbentRecord,
    pub run_log: PathBuf,
    pub incumbent_theta: PathBuf,
}

/// Run the full BO experiment, streaming one JSON line per query into
/// `runlog.jsonl` and writing the final incumbent θ to its own file.
pub fn cmd_tune(config: &ExperimentConfig, out_dir: &Path) -> Result<TuneSummary> {
    config.validate()?;
    let compiled = CompiledExperiment::new(config.clone())?;
    fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join(RUN_LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path)?);
    let header = RunLogLine::Header {
        version: RUN_LOG_VERSION,
        config: Box::new(config.clone()),
    };
    writeln!(log, "{}", serde_json::to_string(&header)?)?;
    log.flush()?;

    let bo_cfg = config.bo_config();
    let start = Instant::now();
    let mut runner = |theta: &[f64]| -> Result<Observation> {
        let ep = compiled.run_episode(theta)?;
        Ok(Observation { g0: ep.g0, g1: ep.g1, g2: ep.g2, diverged: ep.diverged })
    };
    let mut log_error: Option<Error> = None;
    let state = run_bo(&bo_cfg, &mut runner, |state, idx| {
        let q: &Query = &state.history[idx];
        let record = RunLogLine::Iteration(IterationRecord {
            n: idx,
            theta: q.theta.clone(),
            g0: q.g0,
            g1: q.g1,
            g2: q.g2,
            diverged: q.diverged,
            incumbent_value: state.incumbent_query().map(|i| i.g0).unwrap_or(f64::NAN),
            gp_hyperparameters: state.hyperparameters().cloned(),
            wall_time: start.elapsed().as_secs_f64(),
        });
        let res = serde_json::to_string(&record)
            .map_err(Error::from)
            .and_then(|line| {
                writeln!(log, "{line}")?;
                log.flush()?;
                Ok(())
            });
        if let (Err(e), None) = (res, &log_error) {
            log_error = Some(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(e);
    }

    let inc_idx = state
        .incumbent
        .ok_or_else(|| Error::Config("run produced no incumbent".into()))?;
    let inc = &state.history[inc_idx];
    let record = IncumbentRecord {
        n: inc_idx,
        theta: inc.theta.clone(),
        g0: inc.g0,
        g1: inc.g1,
        g2: inc.g2,
        feasible: inc.feasible(),
    };
    writeln!(log, "{}", serde_json::to_string(&RunLogLine::Incumbent(record.clone()))?)?;
    log.flush()?;

    let theta_path = out_dir.join(INCUMBENT_THETA_FILE);
    fs::write(&theta_path, serde_json::to_string(&record.theta)?)?;

    Ok(TuneSummary {
        queries: state.history.len(),
        incumbent: record,
        run_log: log_path,
        incumbent_theta: theta_path,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExportSummary {
    pub all_trajectories: PathBuf,
    pub nominal: PathBuf,
    pub incumbent: PathBuf,
    pub incumbent_jstar: PathBuf,
    pub trajectories: usize,
}

/// Re-simulate every logged query and export plot data: the stacked queried
/// trajectories, the nominal (θ = 0) trajectory, the incumbent trajectory and
/// its optimal-value series. Episodes are deterministic, so the re-simulated
/// trajectories reproduce the logged observations.
pub fn cmd_export_plots(run_log: &Path, out_dir: &Path) -> Result<ExportSummary> {
    let log = read_run_log(run_log)?;
    let compiled = CompiledExperiment::new(log.config.clone())?;
    fs::create_dir_all(out_dir)?;

    let all_path = out_dir.join("all_trajectories.csv");
    let mut all = BufWriter::new(File::create(&all_path)?);
    writeln!(all, "n,k,t,psi1,psi2,dpsi1,dpsi2,u,jstar,status")?;
    for rec in &log.iterations {
        let ep = compiled.run_episode(&rec.theta)?;
        for k in 0..ep.trajectory.states.len() {
            write_csv_row(&mut all, Some(rec.n), k, &ep.trajectory)?;
        }
    }
    all.flush()?;

    let nominal_path = out_dir.join("nominal.csv");
    let nominal = compiled.run_episode(&vec![0.0; compiled.n_params()])?;
    write_trajectory_csv(&nominal_path, &nominal.trajectory)?;

    let incumbent = log
        .incumbent
        .as_ref()
        .ok_or_else(|| Error::Config("run log has no incumbent record".into()))?;
    let incumbent_path = out_dir.join("incumbent.csv");
    let inc_ep = compiled.run_episode(&incumbent.theta)?;
    write_trajectory_csv(&incumbent_path, &inc_ep.trajectory)?;

    let jstar_path = out_dir.join("incumbent_jstar.csv");
    let mut js = BufWriter::new(File::create(&jstar_path)?);
    writeln!(js, "k,t,jstar")?;
    for (k, j) in inc_ep.trajectory.jstar.iter().enumerate() {
        writeln!(js, "{k},{},{j}", k as f64 * inc_ep.trajectory.ts)?;
    }
    js.flush()?;

    Ok(ExportSummary {
        all_trajectories: all_path,
        nominal: nominal_path,
        incumbent: incumbent_path,
        incumbent_jstar: jstar_path,
        trajectories: log.iterations.len(),
    })
}

/// Convenience wrapper returning the episode for a θ under a config.
pub fn simulate_episode(config: &ExperimentConfig, theta: &[f64]) -> Result<EpisodeResult> {
    let compiled = CompiledExperiment::new(config.clone())?;
    if theta.len() != compiled.n_params() {
        return Err(Error::Dimension {
            context: "theta",
            expected: compiled.n_params(),
            actual: theta.len(),
        });
    }
    compiled.run_episode(theta)
}
