//! Experiment configuration, preset resolution, multi-trial orchestration
//! and result files (`trace.csv`, `summary.json`).

pub mod data;
mod output;
mod resolve;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agents::UtilityKind;
use crate::numeric::StepSchedule;
use crate::oracle::{default_rate_window, fit_rate, OracleError, RateFit};
use crate::solver::{Recording, RunTrace, SolverError};

pub use data::{generate_synthetic, load_csv, write_csv, DataError, Dataset};
pub use output::{aggregate, percentile, write_summary, write_trace, Aggregate};
pub use resolve::{resolve, OracleInfo, Problem, Resolved};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("theta_ps oracle failed at {point}: {source}")]
    Oracle { point: String, source: OracleError },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl HarnessError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config(msg.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    GaussianAr,
    StratClassLinear,
    StratClassLogistic,
    Custom,
}

/// Name and one-line description of every preset.
pub const PRESETS: &[(&str, &str)] = &[
    (
        "gaussian_ar",
        "scalar Gaussian AR agent, z_bar=10, sigma=50, eps=0.1, rho=0.5, quadratic loss",
    ),
    (
        "strat_class_linear",
        "agent pool with quadratic utility, synthetic d=3 m=200, eps=0.01, beta=1000/m, |I_k|=5",
    ),
    (
        "strat_class_logistic",
        "agent pool with logistic utility, synthetic d=3 m=200, eps=0.01, beta=1000/m, |I_k|=5",
    ),
    (
        "custom",
        "explicit problem.family and schedule, every other field defaulted per family",
    ),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaussianKernelKind {
    /// AR(1) state-dependent chain.
    Markov,
    /// Fresh draw from `N(z̄ + εθ, σ²)` each time.
    Iid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolDeploy {
    /// Agents take one gradient step per round and remember their features.
    Adapted,
    /// Every sample is an exact best response to the current θ.
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sa,
    Lazy,
    Rrm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub feature_columns: Vec<String>,
    pub label_column: String,
}

/// Problem parameters. Unset fields take the preset's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_bar: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<GaussianKernelKind>,

    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utility: Option<UtilityKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub participation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deploy: Option<PoolDeploy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<CsvSource>,
}

/// Run parameters. Unset fields take the preset's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub br_per_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learner_iters_per_agent_round: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recording: Option<Recording>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub param: String,
    pub values: Vec<Value>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub preset: Preset,
    #[serde(default)]
    pub problem: ProblemParams,
    #[serde(default)]
    pub run: RunParams,
    /// Overrides the preset schedule; required for `custom`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<StepSchedule>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepAxis>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

/// Fields that may be swept. Horizon, recording and algorithm are excluded so
/// that every sweep point shares one k grid.
const SWEEPABLE_PROBLEM: &[&str] = &[
    "epsilon",
    "z_bar",
    "sigma",
    "rho",
    "z0",
    "kernel",
    "utility",
    "beta",
    "alpha",
    "participation",
    "deploy",
    "d",
    "m",
    "data_seed",
];
const SWEEPABLE_RUN: &[&str] = &[
    "seed",
    "theta0",
    "batch",
    "br_per_iter",
    "learner_iters_per_agent_round",
];

/// One point of the sweep's cartesian product.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    /// `param=value` pairs joined by `;`; empty without a sweep.
    pub label: String,
    pub assignments: Vec<(String, Value)>,
    /// The experiment with the assignments applied and no sweep.
    pub spec: ExperimentSpec,
}

fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl ExperimentSpec {
    pub fn preset(preset: Preset) -> Self {
        Self {
            preset,
            problem: ProblemParams::default(),
            run: RunParams::default(),
            schedule: None,
            sweep: Vec::new(),
            output_dir: default_output_dir(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Cartesian product of the sweep axes, first axis outermost.
    pub fn expand(&self) -> Result<Vec<SweepPoint>, HarnessError> {
        let mut base = self.clone();
        base.sweep.clear();
        let mut seen = Vec::new();
        for axis in &self.sweep {
            let p = axis.param.as_str();
            if !SWEEPABLE_PROBLEM.contains(&p) && !SWEEPABLE_RUN.contains(&p) {
                return Err(HarnessError::config(format!(
                    "sweep parameter `{p}` is not a sweepable field"
                )));
            }
            if seen.contains(&p) {
                return Err(HarnessError::config(format!(
                    "sweep parameter `{p}` repeated"
                )));
            }
            if axis.values.is_empty() {
                return Err(HarnessError::config(format!(
                    "sweep parameter `{p}` has no values"
                )));
            }
            seen.push(p);
        }

        let mut combos: Vec<Vec<(String, Value)>> = vec![Vec::new()];
        for axis in &self.sweep {
            combos = combos
                .into_iter()
                .flat_map(|prefix| {
                    axis.values.iter().map(move |v| {
                        let mut next = prefix.clone();
                        next.push((axis.param.clone(), v.clone()));
                        next
                    })
                })
                .collect();
        }

        let base_value =
            serde_json::to_value(&base).map_err(|e| HarnessError::config(e.to_string()))?;
        let mut points = Vec::with_capacity(combos.len());
        for assignments in combos {
            let mut v = base_value.clone();
            for (param, value) in &assignments {
                let section = if SWEEPABLE_PROBLEM.contains(&param.as_str()) {
                    "problem"
                } else {
                    "run"
                };
                v[section][param.as_str()] = value.clone();
            }
            let spec: ExperimentSpec = serde_json::from_value(v)
                .map_err(|e| HarnessError::config(format!("sweep point {assignments:?}: {e}")))?;
            let label = assignments
                .iter()
                .map(|(p, v)| format!("{p}={}", value_label(v)))
                .collect::<Vec<_>>()
                .join(";");
            points.push(SweepPoint {
                label,
                assignments,
                spec,
            });
        }
        let mut labels: Vec<&str> = points.iter().map(|p| p.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(HarnessError::config(
                "sweep values produce duplicate points",
            ));
        }
        Ok(points)
    }
}

/// Why a trial produced no trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialFailure {
    pub trial: u64,
    /// Iteration at which the iterate blew up, for divergence.
    pub iteration: Option<u64>,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct PointResult {
    pub point: Resolved,
    pub aggregate: Aggregate,
    pub failures: Vec<TrialFailure>,
    pub rate_fit: Result<RateFit, String>,
}

impl PointResult {
    pub fn all_failed(&self) -> bool {
        self.aggregate.trials_used == 0
    }
}

/// Resolves every sweep point and runs its trials; nothing is written.
pub fn execute(spec: &ExperimentSpec) -> Result<Vec<PointResult>, HarnessError> {
    let points = spec.expand()?;
    let resolved = points
        .iter()
        .map(|p| resolve(&p.spec, &p.label, &p.assignments))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(resolved.into_iter().map(run_point).collect())
}

fn failure(trial: u64, e: &SolverError) -> TrialFailure {
    TrialFailure {
        trial,
        iteration: match e {
            SolverError::Diverged { iteration, .. } => Some(*iteration),
            _ => None,
        },
        message: e.to_string(),
    }
}

fn run_point(point: Resolved) -> PointResult {
    let trials = point.run.trials as u64;
    let outcomes: Vec<Result<RunTrace, TrialFailure>> = if point.algorithm == Algorithm::Rrm {
        // Repeated risk minimization draws no randomness: one run stands
        // for every trial.
        let once = point.run_rrm();
        (0..trials)
            .map(|t| {
                once.as_ref()
                    .map(RunTrace::clone)
                    .map_err(|e| failure(t, e))
            })
            .collect()
    } else {
        (0..trials)
            .into_par_iter()
            .map(|t| point.run_trial(t).map_err(|e| failure(t, &e)))
            .collect()
    };

    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(trace) => traces.push(trace),
            Err(f) => failures.push(f),
        }
    }
    let grid = point.grid();
    let aggregate = aggregate(&grid, &traces);
    let series: Vec<(u64, f64)> = aggregate
        .k
        .iter()
        .copied()
        .zip(aggregate.err_mean.iter().copied())
        .collect();
    let (lo, hi) = default_rate_window(point.run.horizon);
    let rate_fit = fit_rate(&series, lo, hi).map_err(|e| e.to_string());
    PointResult {
        point,
        aggregate,
        failures,
        rate_fit,
    }
}

#[derive(Debug)]
pub struct Outcome {
    pub results: Vec<PointResult>,
    pub trace_path: PathBuf,
    pub summary_path: PathBuf,
}

impl Outcome {
    /// True when no trial of any point produced a trace.
    pub fn all_diverged(&self) -> bool {
        self.results.iter().all(PointResult::all_failed)
    }
}

/// Runs the experiment and writes `trace.csv` and `summary.json` into
/// `spec.output_dir`.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Outcome, HarnessError> {
    let results = execute(spec)?;
    let dir = &spec.output_dir;
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io {
        path: dir.clone(),
        source,
    })?;
    let trace_path = dir.join("trace.csv");
    let summary_path = dir.join("summary.json");
    write_trace(&trace_path, &results)?;
    write_summary(&summary_path, spec, &results)?;
    Ok(Outcome {
        results,
        trace_path,
        summary_path,
    })
}
