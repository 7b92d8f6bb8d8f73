//! Trial aggregation and the two result files.

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use super::resolve::Problem;
use super::{ExperimentSpec, HarnessError, PointResult};
use crate::solver::RunTrace;

/// Per-k statistics across the trials that finished.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub k: Vec<u64>,
    /// `None` when no trial finished.
    pub samples_drawn: Vec<Option<u64>>,
    pub agent_updates: Vec<Option<u64>>,
    pub err_mean: Vec<f64>,
    pub err_p05: Vec<f64>,
    pub err_p95: Vec<f64>,
    pub trials_used: usize,
}

/// Linear-interpolation percentile of sorted data, `p ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = (n - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Mean and 5th/95th percentiles of the error at every grid index. Traces
/// must be recorded on `grid`.
pub fn aggregate(grid: &[u64], traces: &[RunTrace]) -> Aggregate {
    let n = grid.len();
    let mut out = Aggregate {
        k: grid.to_vec(),
        samples_drawn: vec![None; n],
        agent_updates: vec![None; n],
        err_mean: vec![f64::NAN; n],
        err_p05: vec![f64::NAN; n],
        err_p95: vec![f64::NAN; n],
        trials_used: traces.len(),
    };
    for t in traces {
        assert_eq!(
            t.records.len(),
            n,
            "trace is not recorded on the shared grid"
        );
    }
    if let Some(first) = traces.first() {
        for (i, r) in first.records.iter().enumerate() {
            out.samples_drawn[i] = Some(r.samples_drawn);
            out.agent_updates[i] = Some(r.agent_updates);
        }
    } else {
        return out;
    }
    let mut column = Vec::with_capacity(traces.len());
    for i in 0..n {
        column.clear();
        column.extend(traces.iter().map(|t| t.records[i].error));
        out.err_mean[i] = column.iter().sum::<f64>() / column.len() as f64;
        column.sort_by(f64::total_cmp);
        out.err_p05[i] = percentile(&column, 0.05);
        out.err_p95[i] = percentile(&column, 0.95);
    }
    out
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn count(v: Option<u64>) -> String {
    v.map(|c| c.to_string()).unwrap_or_default()
}

const COLUMNS: [&str; 5] = [
    "samples_drawn",
    "agent_updates",
    "err_mean",
    "err_p05",
    "err_p95",
];

/// Writes one row per grid k, five columns per sweep point.
pub fn write_trace(path: &Path, results: &[PointResult]) -> Result<(), HarnessError> {
    let io = |e: csv::Error| HarnessError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let mut header = vec!["k".to_string()];
    for r in results {
        for c in COLUMNS {
            header.push(if r.point.label.is_empty() {
                c.to_string()
            } else {
                format!("{}/{c}", r.point.label)
            });
        }
    }
    w.write_record(&header).map_err(io)?;
    let Some(first) = results.first() else {
        return w.flush().map_err(|e| io(e.into()));
    };
    for r in results {
        assert_eq!(
            r.aggregate.k, first.aggregate.k,
            "sweep points must share one k grid"
        );
    }
    for (i, k) in first.aggregate.k.iter().enumerate() {
        let mut row = vec![k.to_string()];
        for r in results {
            let a = &r.aggregate;
            row.push(count(a.samples_drawn[i]));
            row.push(count(a.agent_updates[i]));
            row.push(float(a.err_mean[i]));
            row.push(float(a.err_p05[i]));
            row.push(float(a.err_p95[i]));
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| io(e.into()))
}

fn problem_echo(problem: &Problem) -> Value {
    match problem {
        Problem::Gaussian { env, z0, kernel } => json!({
            "family": "gaussian",
            "z_bar": env.z_bar,
            "sigma": env.sigma,
            "epsilon": env.epsilon,
            "rho": env.rho,
            "z0": z0,
            "kernel": kernel,
        }),
        Problem::Pool {
            dataset,
            source,
            data_seed,
            utility,
            alpha,
            participation,
            deploy,
        } => {
            json!({
                "family": "pool",
                "utility": utility.kind,
                "epsilon": utility.epsilon,
                "alpha": alpha,
                "participation": participation,
                "deploy": deploy,
                "d": dataset.d(),
                "m": dataset.m(),
                "data": match source {
                    Some(src) => json!({ "csv": src }),
                    None => json!({ "synthetic_seed": data_seed }),
                },
            })
        }
    }
}

#[derive(Serialize)]
struct Summary {
    schema: u32,
    /// The experiment as given, minus `output_dir`, so that identical runs
    /// written to different places produce identical summaries.
    config: Value,
    points: Vec<Value>,
    all_trials_diverged: bool,
}

fn finite_or_null(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn point_summary(r: &PointResult) -> Value {
    let p = &r.point;
    let c = &p.constants;
    let assignments: serde_json::Map<String, Value> = p
        .assignments
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let (rate_fit, rate_fit_error) = match &r.rate_fit {
        Ok(fit) => (json!(fit), Value::Null),
        Err(msg) => (Value::Null, json!(msg)),
    };
    let last = r.aggregate.err_mean.last().copied().unwrap_or(f64::NAN);
    json!({
        "label": p.label,
        "sweep": assignments,
        "algorithm": p.algorithm,
        "loss": p.loss,
        "problem": problem_echo(&p.problem),
        "theta_ps": p.theta_ps.as_slice(),
        "oracle": p.oracle,
        "constants": {
            "mu": c.mu(),
            "lipschitz": c.lipschitz(),
            "sensitivity": c.sensitivity(),
            "sigma_noise": c.sigma_noise(),
            "mu_tilde": c.mu_tilde(),
        },
        "estimates": p.estimates,
        "schedule": p.schedule,
        "schedule_source": p.schedule_source,
        "run": p.run,
        "rate_fit_slope": r.rate_fit.as_ref().ok().map(|f| f.slope),
        "rate_fit": rate_fit,
        "rate_fit_error": rate_fit_error,
        "final_err_mean": finite_or_null(last),
        "trials_used": r.aggregate.trials_used,
        "failed_trials": r.failures,
    })
}

pub fn write_summary(
    path: &Path,
    spec: &ExperimentSpec,
    results: &[PointResult],
) -> Result<(), HarnessError> {
    let mut config = serde_json::to_value(spec).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    if let Value::Object(map) = &mut config {
        map.remove("output_dir");
    }
    let summary = Summary {
        schema: 1,
        config,
        points: results.iter().map(point_summary).collect(),
        all_trials_diverged: results.iter().all(PointResult::all_failed),
    };
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })
}
