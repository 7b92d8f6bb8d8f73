//! Turns an [`ExperimentSpec`] point into concrete objects: loss, problem,
//! constants, schedule, run configuration and θ_PS.

use serde::Serialize;
use serde_json::Value;

use super::data::{generate_synthetic, load_csv, Dataset};
use super::{
    Algorithm, CsvSource, ExperimentSpec, Family, GaussianKernelKind, HarnessError, PoolDeploy,
    Preset, ProblemParams,
};
use crate::agents::{
    AgentPool, ArKernel, BestResponseLaw, DistributionMap, GaussianEnv, GaussianIid, GreedyPool,
    InnerSolver, Kernel, Utility, UtilityKind,
};
use crate::losses::{estimate_logistic_constants, LogisticEstimates, LossModel};
use crate::numeric::{ParamVector, ProblemConstants, StepSchedule};
use crate::oracle::{theta_ps_fixed_point, theta_ps_gaussian, FixedPointTolerances};
use crate::solver::{
    lazy_run, rrm_run, sa_run, Recording, RunConfig, RunTrace, SolverError, TraceRecord,
};

const GAUSSIAN_ONLY: &[&str] = &["z_bar", "sigma", "rho", "z0", "kernel"];
const POOL_ONLY: &[&str] = &[
    "utility",
    "beta",
    "alpha",
    "participation",
    "deploy",
    "d",
    "m",
    "data_seed",
    "data",
];

/// Inner tolerance of the repeated risk minimization algorithm.
const RRM_INNER_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub enum Problem {
    Gaussian {
        env: GaussianEnv,
        z0: f64,
        kernel: GaussianKernelKind,
    },
    Pool {
        dataset: Dataset,
        source: Option<CsvSource>,
        data_seed: u64,
        utility: Utility,
        alpha: f64,
        participation: usize,
        deploy: PoolDeploy,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleInfo {
    pub method: &'static str,
    /// `‖∇f(θ_PS; θ_PS)‖`.
    pub residual: f64,
    pub outer_iters: usize,
}

/// A fully resolved sweep point.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub label: String,
    pub assignments: Vec<(String, Value)>,
    pub algorithm: Algorithm,
    pub loss: LossModel,
    pub problem: Problem,
    pub constants: ProblemConstants,
    pub schedule: StepSchedule,
    /// `"preset"` or `"config"`.
    pub schedule_source: &'static str,
    /// Data-based estimates the pool presets derive their schedule from.
    pub estimates: Option<LogisticEstimates>,
    pub run: RunConfig,
    pub theta_ps: ParamVector,
    pub oracle: OracleInfo,
}

fn set_fields(p: &ProblemParams) -> Vec<&'static str> {
    let v = serde_json::to_value(p).unwrap_or(Value::Null);
    let names = GAUSSIAN_ONLY.iter().chain(POOL_ONLY);
    names.copied().filter(|n| v.get(*n).is_some()).collect()
}

fn positive(name: &str, v: f64) -> Result<f64, HarnessError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(HarnessError::config(format!(
            "{name} must be finite and > 0, got {v}"
        )))
    }
}

pub fn resolve(
    spec: &ExperimentSpec,
    label: &str,
    assignments: &[(String, Value)],
) -> Result<Resolved, HarnessError> {
    let p = &spec.problem;
    let (family, preset_utility) = match spec.preset {
        Preset::GaussianAr => (Family::Gaussian, None),
        Preset::StratClassLinear => (Family::Pool, Some(UtilityKind::Quadratic)),
        Preset::StratClassLogistic => (Family::Pool, Some(UtilityKind::Logistic)),
        Preset::Custom => {
            let family = p
                .family
                .ok_or_else(|| HarnessError::config("preset `custom` needs problem.family"))?;
            if spec.schedule.is_none() {
                return Err(HarnessError::config(
                    "preset `custom` needs an explicit schedule",
                ));
            }
            (family, None)
        }
    };
    if let Some(f) = p.family {
        if f != family {
            return Err(HarnessError::config(format!(
                "problem.family {f:?} conflicts with preset {:?}",
                spec.preset
            )));
        }
    }
    let foreign = if family == Family::Gaussian {
        POOL_ONLY
    } else {
        GAUSSIAN_ONLY
    };
    if let Some(name) = set_fields(p).into_iter().find(|n| foreign.contains(n)) {
        return Err(HarnessError::config(format!(
            "problem.{name} does not apply to the {family:?} family"
        )));
    }

    let partial = match family {
        Family::Gaussian => gaussian(p)?,
        Family::Pool => pool(p, preset_utility, label)?,
    };
    let Partial {
        loss,
        problem,
        constants,
        preset_schedule,
        estimates,
        theta_ps,
        oracle,
    } = partial;
    let (schedule, schedule_source) = match spec.schedule {
        Some(s) => {
            s.validate()
                .map_err(|e| HarnessError::config(e.to_string()))?;
            (s, "config")
        }
        None => (preset_schedule, "preset"),
    };

    let r = &spec.run;
    let dim = theta_ps.dim();
    let (horizon, trials) = match family {
        Family::Gaussian => (100_000, 20),
        Family::Pool => (20_000, 10),
    };
    let theta0 = match &r.theta0 {
        Some(v) => ParamVector::new(v.clone())
            .map_err(|e| HarnessError::config(format!("run.theta0: {e}")))?,
        None => ParamVector::zeros(dim),
    };
    if theta0.dim() != dim {
        return Err(HarnessError::config(format!(
            "run.theta0 has {} coordinates, the problem has {dim}",
            theta0.dim()
        )));
    }
    let algorithm = r.algorithm.unwrap_or(Algorithm::Sa);
    let mut run = RunConfig::new(theta0, schedule, r.horizon.unwrap_or(horizon));
    run.trials = r.trials.unwrap_or(trials);
    run.seed = r.seed.unwrap_or(0);
    run.batch = r.batch.unwrap_or(1);
    run.br_per_iter = r.br_per_iter.unwrap_or(1);
    run.learner_iters_per_agent_round = r.learner_iters_per_agent_round.unwrap_or(1);
    run.recording = r.recording.unwrap_or(Recording::LOG_SPACED);
    run.validate()
        .map_err(|e| HarnessError::config(e.to_string()))?;
    if algorithm != Algorithm::Lazy && run.learner_iters_per_agent_round > 1 {
        return Err(HarnessError::config(
            "learner_iters_per_agent_round > 1 requires algorithm `lazy`",
        ));
    }
    if let Problem::Pool {
        dataset,
        participation,
        ..
    } = &problem
    {
        if run.batch > dataset.m() || *participation > dataset.m() {
            return Err(HarnessError::config(format!(
                "batch and participation must not exceed the {} agents",
                dataset.m()
            )));
        }
    }

    Ok(Resolved {
        label: label.to_string(),
        assignments: assignments.to_vec(),
        algorithm,
        loss,
        problem,
        constants,
        schedule,
        schedule_source,
        estimates,
        run,
        theta_ps,
        oracle,
    })
}

struct Partial {
    loss: LossModel,
    problem: Problem,
    constants: ProblemConstants,
    preset_schedule: StepSchedule,
    estimates: Option<LogisticEstimates>,
    theta_ps: ParamVector,
    oracle: OracleInfo,
}

fn gaussian(p: &ProblemParams) -> Result<Partial, HarnessError> {
    let z_bar = p.z_bar.unwrap_or(10.0);
    let env = GaussianEnv::new(
        z_bar,
        p.epsilon.unwrap_or(0.1),
        p.sigma.unwrap_or(50.0),
        p.rho.unwrap_or(0.5),
    )
    .map_err(|e| HarnessError::config(e.to_string()))?;
    let z0 = p.z0.unwrap_or(z_bar);
    if !z0.is_finite() {
        return Err(HarnessError::config("z0 must be finite"));
    }
    let loss = LossModel::Quadratic;
    let constants = ProblemConstants::new(1.0, 1.0, env.epsilon, env.sigma)
        .map_err(|e| HarnessError::config(e.to_string()))?;
    let mt = constants.mu_tilde();
    let preset_schedule = StepSchedule::inverse(500.0 / mt, 800.0 / (mt * mt))
        .map_err(|e| HarnessError::config(e.to_string()))?;
    let ps = theta_ps_gaussian(&env).map_err(|e| HarnessError::config(e.to_string()))?;
    let theta_ps = ParamVector::scalar(ps).map_err(|e| HarnessError::config(e.to_string()))?;
    let law = env
        .materialize(&theta_ps)
        .map_err(|e| HarnessError::config(e.to_string()))?;
    let residual = loss
        .mean_grad(&theta_ps, &law)
        .map_err(|e| HarnessError::config(e.to_string()))?
        .norm();
    Ok(Partial {
        loss,
        problem: Problem::Gaussian {
            env,
            z0,
            kernel: p.kernel.unwrap_or(GaussianKernelKind::Markov),
        },
        constants,
        preset_schedule,
        estimates: None,
        theta_ps,
        oracle: OracleInfo {
            method: "closed_form",
            residual,
            outer_iters: 0,
        },
    })
}

fn pool(
    p: &ProblemParams,
    preset_utility: Option<UtilityKind>,
    label: &str,
) -> Result<Partial, HarnessError> {
    let kind = match (preset_utility, p.utility) {
        (Some(a), Some(b)) if a != b => {
            return Err(HarnessError::config(format!(
                "problem.utility {b:?} conflicts with the preset's {a:?}"
            )))
        }
        (Some(a), _) | (None, Some(a)) => a,
        (None, None) => return Err(HarnessError::config("pool family needs problem.utility")),
    };
    let data_seed = p.data_seed.unwrap_or(0);
    let dataset = match &p.data {
        Some(src) => {
            if p.d.is_some() || p.m.is_some() || p.data_seed.is_some() {
                return Err(HarnessError::config(
                    "problem.d, m and data_seed cannot be combined with problem.data",
                ));
            }
            load_csv(&src.path, &src.feature_columns, &src.label_column)?
        }
        None => generate_synthetic(p.d.unwrap_or(3), p.m.unwrap_or(200), data_seed)?,
    };
    let m = dataset.m() as f64;
    let epsilon = p.epsilon.unwrap_or(0.01);
    let beta = positive("beta", p.beta.unwrap_or(1000.0 / m))?;
    let alpha = positive("alpha", p.alpha.unwrap_or(0.5 * epsilon))?;
    let utility = Utility::new(kind, epsilon).map_err(|e| HarnessError::config(e.to_string()))?;
    if epsilon <= 0.0 {
        return Err(HarnessError::config("pool family needs epsilon > 0"));
    }
    let participation = p.participation.unwrap_or(5);
    let deploy = p.deploy.unwrap_or(PoolDeploy::Adapted);

    let loss = LossModel::RegLogistic { beta };
    let estimates = estimate_logistic_constants(&dataset.features(), beta, epsilon);
    let mt = estimates.mu_tilde;
    if mt.is_nan() || mt <= 0.0 {
        return Err(HarnessError::config(format!(
            "estimated mu_tilde = {mt} is not positive; lower epsilon or raise beta"
        )));
    }
    let l = estimates.lipschitz;
    let preset_schedule = StepSchedule::inverse(100.0 / mt, 8.0 * l * l / (mt * mt))
        .map_err(|e| HarnessError::config(e.to_string()))?;

    let law = BestResponseLaw::new(dataset.samples.clone(), utility, InnerSolver::default())
        .map_err(|e| HarnessError::config(e.to_string()))?;
    let fp = theta_ps_fixed_point(
        &loss,
        &law,
        &ParamVector::zeros(dataset.d()),
        &FixedPointTolerances::default(),
    )
    .map_err(|source| HarnessError::Oracle {
        point: if label.is_empty() {
            "default point".into()
        } else {
            label.to_string()
        },
        source,
    })?;
    let sigma_noise = gradient_spread(&loss, &law, &fp.theta)?;
    let constants = ProblemConstants::new(beta, l, epsilon, sigma_noise)
        .map_err(|e| HarnessError::config(e.to_string()))?;

    Ok(Partial {
        loss,
        problem: Problem::Pool {
            dataset,
            source: p.data.clone(),
            data_seed,
            utility,
            alpha,
            participation,
            deploy,
        },
        constants,
        preset_schedule,
        estimates: Some(estimates),
        theta_ps: fp.theta,
        oracle: OracleInfo {
            method: "repeated_risk_minimization",
            residual: fp.residual,
            outer_iters: fp.outer_iters,
        },
    })
}

/// Root-mean-square deviation of per-sample gradients from their mean
/// under `D(θ)`.
fn gradient_spread(
    loss: &LossModel,
    law: &BestResponseLaw,
    theta: &ParamVector,
) -> Result<f64, HarnessError> {
    let cfg = |e: &dyn std::fmt::Display| HarnessError::config(e.to_string());
    let samples = law.materialize(theta).map_err(|e| cfg(&e))?;
    let mean = loss.mean_grad(theta, &samples).map_err(|e| cfg(&e))?;
    let mut g = vec![0.0; theta.dim()];
    let mut total = 0.0;
    for z in &samples {
        loss.grad_into(theta, z, &mut g).map_err(|e| cfg(&e))?;
        total += g
            .iter()
            .zip(mean.as_slice())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>();
    }
    Ok((total / samples.len() as f64).sqrt())
}

impl Resolved {
    /// k grid shared by every trial of this point.
    pub fn grid(&self) -> Vec<u64> {
        match self.algorithm {
            Algorithm::Rrm => (0..=self.run.horizon).collect(),
            _ => self.run.recording.grid(self.run.horizon),
        }
    }

    fn drive<K: Kernel>(&self, mut kernel: K, trial: u64) -> Result<RunTrace, SolverError> {
        match self.algorithm {
            Algorithm::Lazy => lazy_run(&self.loss, &mut kernel, &self.run, &self.theta_ps, trial),
            _ => sa_run(&self.loss, &mut kernel, &self.run, &self.theta_ps, trial),
        }
    }

    /// One stochastic trial (algorithms `sa` and `lazy`).
    pub fn run_trial(&self, trial: u64) -> Result<RunTrace, SolverError> {
        match &self.problem {
            Problem::Gaussian {
                env,
                z0,
                kernel: GaussianKernelKind::Markov,
            } => self.drive(ArKernel::new(*env, *z0), trial),
            Problem::Gaussian {
                env,
                kernel: GaussianKernelKind::Iid,
                ..
            } => self.drive(GaussianIid::new(*env), trial),
            Problem::Pool {
                dataset,
                utility,
                alpha,
                participation,
                deploy,
                ..
            } => match deploy {
                PoolDeploy::Adapted => {
                    let pool =
                        AgentPool::new(dataset.samples.clone(), *utility, *alpha, *participation)?;
                    self.drive(pool, trial)
                }
                PoolDeploy::Greedy => {
                    let pool =
                        GreedyPool::new(dataset.samples.clone(), *utility, InnerSolver::default())?;
                    self.drive(pool, trial)
                }
            },
        }
    }

    /// Repeated risk minimization for `horizon` outer steps; `k` counts
    /// outer steps and every step consumes the whole materialized law.
    pub fn run_rrm(&self) -> Result<RunTrace, SolverError> {
        let h = self.run.horizon as usize;
        let (path, law_size) = match &self.problem {
            Problem::Gaussian { env, .. } => (
                rrm_run(&self.loss, env, &self.run.theta0, h, RRM_INNER_TOL)?,
                2,
            ),
            Problem::Pool {
                dataset, utility, ..
            } => {
                let law = BestResponseLaw::new(
                    dataset.samples.clone(),
                    *utility,
                    InnerSolver::default(),
                )?;
                (
                    rrm_run(&self.loss, &law, &self.run.theta0, h, RRM_INNER_TOL)?,
                    dataset.m() as u64,
                )
            }
        };
        let records = path
            .iter()
            .enumerate()
            .map(|(k, theta)| TraceRecord {
                k: k as u64,
                error: theta.dist_sq(&self.theta_ps),
                samples_drawn: k as u64 * law_size,
                agent_updates: k as u64 * law_size,
            })
            .collect();
        let final_theta = path
            .last()
            .cloned()
            .unwrap_or_else(|| self.run.theta0.clone());
        Ok(RunTrace {
            records,
            final_theta,
        })
    }
}
