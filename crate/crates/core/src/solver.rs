//! Learner loops: state-dependent SA with its minibatch, multi-round and
//! lazy-deploy variants, repeated risk minimization, and a one-step
//! contraction probe.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, DistributionMap, GaussianIid, GreedyPool, Kernel};
use crate::losses::{LossError, LossModel, Sample};
use crate::numeric::{ParamVector, ProblemConstants, RngStream, StepSchedule, StreamRole};

/// `‖θ‖` beyond which a run is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("iterate diverged at iteration {iteration} (|theta| = {norm:e})")]
    Diverged { iteration: u64, norm: f64 },
    #[error("inner minimization stalled at outer step {outer}: |grad| = {grad_norm:e} after {iterations} iterations")]
    InnerNonConvergence {
        outer: usize,
        iterations: usize,
        grad_norm: f64,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// Which iterations end up in a [`RunTrace`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Recording {
    /// Every `k = 0..=K`.
    #[default]
    Every,
    /// Every `k <= dense_until`, then `⌈growth^j⌉`, plus `K` itself.
    Thinned { dense_until: u64, growth: f64 },
}

impl Recording {
    pub const LOG_SPACED: Recording = Recording::Thinned {
        dense_until: 1000,
        growth: 1.05,
    };

    /// Sorted, de-duplicated iteration indices in `0..=horizon`.
    pub fn grid(&self, horizon: u64) -> Vec<u64> {
        match *self {
            Recording::Every => (0..=horizon).collect(),
            Recording::Thinned {
                dense_until,
                growth,
            } => {
                let dense = dense_until.min(horizon);
                let mut grid: Vec<u64> = (0..=dense).collect();
                if growth > 1.0 {
                    let mut x = growth;
                    loop {
                        let k = x.ceil() as u64;
                        if k > horizon {
                            break;
                        }
                        if k > *grid.last().unwrap() {
                            grid.push(k);
                        }
                        x *= growth;
                    }
                }
                if *grid.last().unwrap() != horizon {
                    grid.push(horizon);
                }
                grid
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub theta0: ParamVector,
    pub schedule: StepSchedule,
    pub horizon: u64,
    /// Minibatch size: distinct agents averaged per learner update.
    pub batch: usize,
    /// Agent best-response rounds per learner update.
    pub br_per_iter: usize,
    /// Learner updates per agent round (lazy deployment).
    pub learner_iters_per_agent_round: usize,
    pub trials: usize,
    pub seed: u64,
    #[serde(default)]
    pub recording: Recording,
}

impl RunConfig {
    pub fn new(theta0: ParamVector, schedule: StepSchedule, horizon: u64) -> Self {
        Self {
            theta0,
            schedule,
            horizon,
            batch: 1,
            br_per_iter: 1,
            learner_iters_per_agent_round: 1,
            trials: 1,
            seed: 0,
            recording: Recording::Every,
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let bad = |msg: String| Err(SolverError::InvalidConfig(msg));
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if self.br_per_iter == 0 {
            return bad("br_per_iter must be >= 1".into());
        }
        if self.learner_iters_per_agent_round == 0 {
            return bad("learner_iters_per_agent_round must be >= 1".into());
        }
        if self.trials == 0 {
            return bad("trials must be >= 1".into());
        }
        if self.br_per_iter > 1 && self.learner_iters_per_agent_round > 1 {
            return bad(
                "br_per_iter and learner_iters_per_agent_round cannot both exceed 1".into(),
            );
        }
        self.schedule
            .validate()
            .map_err(|e| SolverError::InvalidConfig(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: u64,
    /// `‖θ_k - θ_PS‖²`.
    pub error: f64,
    /// Cumulative samples consumed by the learner.
    pub samples_drawn: u64,
    /// Cumulative agent best-response rounds.
    pub agent_updates: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub final_theta: ParamVector,
}

/// Agent and sampler streams of one trial.
#[derive(Debug, Clone)]
pub struct TrialStreams {
    pub agents: RngStream,
    pub sampler: RngStream,
}

impl TrialStreams {
    pub fn new(seed: u64, trial: u64) -> Self {
        Self {
            agents: RngStream::for_trial(seed, trial, StreamRole::Agents),
            sampler: RngStream::for_trial(seed, trial, StreamRole::Sampler),
        }
    }
}

fn drive<K: Kernel + ?Sized>(
    loss: &LossModel,
    kernel: &mut K,
    config: &RunConfig,
    theta_ps: &ParamVector,
    learner_iters: usize,
    trial: u64,
) -> Result<RunTrace, SolverError> {
    config.validate()?;
    if theta_ps.dim() != config.theta0.dim() {
        return Err(SolverError::InvalidConfig(format!(
            "theta_ps has {} coordinates, theta0 has {}",
            theta_ps.dim(),
            config.theta0.dim()
        )));
    }
    let mut streams = TrialStreams::new(config.seed, trial);
    let grid = config.recording.grid(config.horizon);
    let mut next_record = grid.iter().copied().peekable();

    let mut theta = config.theta0.clone();
    let mut k = 0u64;
    let mut samples_drawn = 0u64;
    let mut agent_updates = 0u64;
    let mut records = Vec::with_capacity(grid.len());
    let mut record = |k: u64, theta: &ParamVector, samples: u64, agents: u64| {
        if next_record.peek() == Some(&k) {
            next_record.next();
            records.push(TraceRecord {
                k,
                error: theta.dist_sq(theta_ps),
                samples_drawn: samples,
                agent_updates: agents,
            });
        }
    };
    record(0, &theta, 0, 0);

    while k < config.horizon {
        for _ in 0..config.br_per_iter {
            kernel.advance(&theta, &mut streams.agents)?;
            agent_updates += 1;
        }
        for _ in 0..learner_iters {
            if k == config.horizon {
                break;
            }
            let batch = kernel.emit_batch(&theta, config.batch, &mut streams.sampler)?;
            let grad = loss.mean_grad(&theta, &batch)?;
            let gamma = config.schedule.step_at(k + 1);
            theta.descend(gamma, grad.as_slice());
            k += 1;
            samples_drawn += batch.len() as u64;
            let norm = theta.norm();
            if !theta.is_finite() || norm > DIVERGENCE_NORM {
                return Err(SolverError::Diverged { iteration: k, norm });
            }
            record(k, &theta, samples_drawn, agent_updates);
        }
    }
    Ok(RunTrace {
        records,
        final_theta: theta,
    })
}

/// State-dependent SA: per iteration the agents take `br_per_iter` rounds
/// under `θ_k`, the learner averages the gradients of `batch` emitted samples
/// and steps `θ_{k+1} = θ_k - γ_{k+1} * mean_grad`.
///
/// `trial` selects the random sub-streams; a given `(config, trial)` replays
/// bit-for-bit.
pub fn sa_run<K: Kernel + ?Sized>(
    loss: &LossModel,
    kernel: &mut K,
    config: &RunConfig,
    theta_ps: &ParamVector,
    trial: u64,
) -> Result<RunTrace, SolverError> {
    drive(loss, kernel, config, theta_ps, 1, trial)
}

/// Lazy deployment: one agent round per outer step, then
/// `learner_iters_per_agent_round` learner updates that re-draw samples from
/// the frozen agent state. `horizon` counts learner updates.
pub fn lazy_run<K: Kernel + ?Sized>(
    loss: &LossModel,
    kernel: &mut K,
    config: &RunConfig,
    theta_ps: &ParamVector,
    trial: u64,
) -> Result<RunTrace, SolverError> {
    drive(
        loss,
        kernel,
        config,
        theta_ps,
        config.learner_iters_per_agent_round,
        trial,
    )
}

/// Iteration cap for [`minimize_empirical`].
pub const MAX_INNER_ITERS: usize = 200_000;

/// Full-batch gradient descent with step `1 / L_emp` on the empirical risk,
/// warm-started at `start`, until `‖∇‖ <= tol`.
pub fn minimize_empirical(
    loss: &LossModel,
    dataset: &[Sample],
    start: &ParamVector,
    tol: f64,
) -> Result<(ParamVector, usize), (ParamVector, usize, f64)> {
    let step = 1.0 / loss.empirical_smoothness(dataset);
    let mut theta = start.clone();
    let mut grad_norm = f64::INFINITY;
    for it in 0..=MAX_INNER_ITERS {
        let g = match loss.mean_grad(&theta, dataset) {
            Ok(g) => g,
            Err(_) => return Err((theta, it, f64::NAN)),
        };
        grad_norm = g.norm();
        if grad_norm <= tol {
            return Ok((theta, it));
        }
        theta.descend(step, g.as_slice());
    }
    Err((theta, MAX_INNER_ITERS, grad_norm))
}

/// Repeated risk minimization: `θ_{t+1} = argmin_θ mean loss over D(θ_t)`.
/// Returns `[θ_0, θ_1, ..., θ_outer_iters]`.
pub fn rrm_run<D: DistributionMap + ?Sized>(
    loss: &LossModel,
    law: &D,
    theta0: &ParamVector,
    outer_iters: usize,
    inner_tol: f64,
) -> Result<Vec<ParamVector>, SolverError> {
    let mut path = Vec::with_capacity(outer_iters + 1);
    path.push(theta0.clone());
    for outer in 0..outer_iters {
        let current = path.last().unwrap();
        let next = rrm_step(loss, law, current, inner_tol, outer)?;
        path.push(next);
    }
    Ok(path)
}

pub(crate) fn rrm_step<D: DistributionMap + ?Sized>(
    loss: &LossModel,
    law: &D,
    theta: &ParamVector,
    inner_tol: f64,
    outer: usize,
) -> Result<ParamVector, SolverError> {
    let dataset = law.materialize(theta)?;
    // Surface dimension/kind errors before the descent loop swallows them.
    loss.mean_grad(theta, &dataset)?;
    match minimize_empirical(loss, &dataset, theta, inner_tol) {
        Ok((next, _)) => Ok(next),
        Err((_, iterations, grad_norm)) => Err(SolverError::InnerNonConvergence {
            outer,
            iterations,
            grad_norm,
        }),
    }
}

/// Kernels whose emissions are independent draws from `D(θ)`.
pub trait Memoryless: Kernel {}

impl Memoryless for GaussianIid {}
impl Memoryless for GreedyPool {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    /// Monte Carlo estimate of `E‖θ⁺ - θ_PS‖²`.
    pub lhs: f64,
    /// `(1 - 2γμ̃ + 2L²γ²)‖θ - θ_PS‖² + 2σ²γ²`.
    pub rhs: f64,
    /// Standard error of `lhs`.
    pub stderr: f64,
}

impl ProbeResult {
    pub fn passes(&self) -> bool {
        self.lhs <= self.rhs + 3.0 * self.stderr
    }
}

/// Monte Carlo check of the one-step progress inequality for a single SA
/// update from `theta` with step `gamma`, using `n_mc` fresh i.i.d. samples.
#[allow(clippy::too_many_arguments)]
pub fn one_step_contraction_probe<K: Memoryless + ?Sized>(
    loss: &LossModel,
    kernel: &mut K,
    constants: &ProblemConstants,
    theta: &ParamVector,
    theta_ps: &ParamVector,
    gamma: f64,
    n_mc: usize,
    rng: &mut RngStream,
) -> Result<ProbeResult, SolverError> {
    if n_mc == 0 {
        return Err(SolverError::InvalidConfig("n_mc must be >= 1".into()));
    }
    // Welford keeps the mean exact when every draw is identical.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    let mut g = vec![0.0; theta.dim()];
    for n in 1..=n_mc {
        let z = kernel.emit(theta, rng)?;
        loss.grad_into(theta, &z, &mut g)?;
        let mut next = theta.clone();
        next.descend(gamma, &g);
        let x = next.dist_sq(theta_ps);
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
    }
    let var = if n_mc > 1 {
        m2 / (n_mc - 1) as f64
    } else {
        0.0
    };
    let gap = theta.dist_sq(theta_ps);
    let mu_tilde = constants.mu_tilde();
    let l = constants.lipschitz();
    let sigma = constants.sigma_noise();
    let rhs = (1.0 - 2.0 * gamma * mu_tilde + 2.0 * l * l * gamma * gamma) * gap
        + 2.0 * sigma * sigma * gamma * gamma;
    Ok(ProbeResult {
        lhs: mean,
        rhs,
        stderr: (var / n_mc as f64).sqrt(),
    })
}
