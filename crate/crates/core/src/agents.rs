//! Controlled Markov kernels that produce the learner's sample stream.
//!
//! A kernel owns the agent-side state and exposes two halves of one
//! transition: [`Kernel::advance`] moves the agents under the deployed model
//! (the best-response round or AR innovation), and [`Kernel::emit`] hands a
//! sample to the learner as a function of the post-transition state only.
//! State is kept in place; the pool variant never materializes the
//! `(d_1, ..., d_m, z)` tuple.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{sigmoid, softplus, LabeledSample, Sample};
use crate::numeric::{dot, norm_sq, ParamVector, RngStream};

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    Invalid(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("agent {agent} has a non-finite feature after its update (response rate too large?)")]
    NonFinite { agent: usize },
    #[error("best response did not converge in {iterations} iterations (residual {residual:e})")]
    InnerNonConvergence { iterations: usize, residual: f64 },
}

/// Gaussian mean-estimation environment: `D(θ) = N(z̄ + εθ, σ²)`, with an
/// optional AR regression parameter `ρ` for the stateful agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianEnv {
    pub z_bar: f64,
    pub epsilon: f64,
    pub sigma: f64,
    pub rho: f64,
}

impl GaussianEnv {
    pub fn new(z_bar: f64, epsilon: f64, sigma: f64, rho: f64) -> Result<Self, AgentError> {
        let env = Self {
            z_bar,
            epsilon,
            sigma,
            rho,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let Self {
            z_bar,
            epsilon,
            sigma,
            rho,
        } = *self;
        if ![z_bar, epsilon, sigma, rho].iter().all(|v| v.is_finite()) {
            return Err(AgentError::Invalid("non-finite Gaussian parameter".into()));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(AgentError::Invalid(format!(
                "epsilon must lie in [0, 1), got {epsilon}"
            )));
        }
        if sigma < 0.0 {
            return Err(AgentError::Invalid(format!(
                "sigma must be >= 0, got {sigma}"
            )));
        }
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(AgentError::Invalid(format!(
                "rho must lie in (0, 1], got {rho}"
            )));
        }
        Ok(())
    }

    /// Mean of `D(θ)`.
    pub fn mean_at(&self, theta: f64) -> f64 {
        self.z_bar + self.epsilon * theta
    }

    /// Variance of the AR chain's stationary law at any fixed θ.
    pub fn stationary_variance(&self) -> f64 {
        self.sigma * self.sigma * self.rho / (2.0 - self.rho)
    }
}

/// One draw `z ~ D(θ)`.
fn gaussian_draw(env: &GaussianEnv, theta: f64, rng: &mut RngStream) -> f64 {
    let xi: f64 = rng.sample(StandardNormal);
    env.mean_at(theta) + env.sigma * xi
}

/// What one kernel application hands to the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelOutput {
    pub emitted: Sample,
}

/// A controlled Markov transition `P_θ`.
pub trait Kernel {
    /// Agent-side transition under the deployed `theta`.
    fn advance(&mut self, theta: &ParamVector, rng: &mut RngStream) -> Result<(), AgentError>;

    /// Sample handed to the learner, drawn from the current state.
    fn emit(&mut self, theta: &ParamVector, rng: &mut RngStream) -> Result<Sample, AgentError>;

    /// `count` samples for one minibatch.
    fn emit_batch(
        &mut self,
        theta: &ParamVector,
        count: usize,
        rng: &mut RngStream,
    ) -> Result<Vec<Sample>, AgentError> {
        (0..count).map(|_| self.emit(theta, rng)).collect()
    }

    /// Full transition: `advance` under the agent stream, then `emit` under
    /// the sampler stream.
    fn step(
        &mut self,
        theta: &ParamVector,
        agent_rng: &mut RngStream,
        sample_rng: &mut RngStream,
    ) -> Result<KernelOutput, AgentError> {
        self.advance(theta, agent_rng)?;
        Ok(KernelOutput {
            emitted: self.emit(theta, sample_rng)?,
        })
    }
}

/// Greedy deployment on the Gaussian problem: every sample is a fresh
/// independent draw from `D(θ)`.
#[derive(Debug, Clone)]
pub struct GaussianIid {
    pub env: GaussianEnv,
}

impl GaussianIid {
    pub fn new(env: GaussianEnv) -> Self {
        Self { env }
    }

    pub fn iid_step(&self, theta: &ParamVector, rng: &mut RngStream) -> KernelOutput {
        KernelOutput {
            emitted: Sample::Scalar(gaussian_draw(&self.env, theta.first(), rng)),
        }
    }
}

impl Kernel for GaussianIid {
    fn advance(&mut self, _theta: &ParamVector, _rng: &mut RngStream) -> Result<(), AgentError> {
        Ok(())
    }

    fn emit(&mut self, theta: &ParamVector, rng: &mut RngStream) -> Result<Sample, AgentError> {
        Ok(self.iid_step(theta, rng).emitted)
    }
}

/// `z' = (1 - ρ) z + ρ (z̄ + εθ + σξ)`, `ξ ~ N(0, 1)`. With `ρ = 1` this is
/// bit-for-bit an i.i.d. draw from `D(θ)`.
pub fn ar_step(
    env: &GaussianEnv,
    z: f64,
    theta: &ParamVector,
    rng: &mut RngStream,
) -> KernelOutput {
    let fresh = gaussian_draw(env, theta.first(), rng);
    let next = (1.0 - env.rho) * z + env.rho * fresh;
    KernelOutput {
        emitted: Sample::Scalar(next),
    }
}

/// Stateful Gaussian agent following the AR recursion.
#[derive(Debug, Clone)]
pub struct ArKernel {
    pub env: GaussianEnv,
    z: f64,
}

impl ArKernel {
    pub fn new(env: GaussianEnv, z0: f64) -> Self {
        Self { env, z: z0 }
    }

    pub fn state(&self) -> f64 {
        self.z
    }
}

impl Kernel for ArKernel {
    fn advance(&mut self, theta: &ParamVector, rng: &mut RngStream) -> Result<(), AgentError> {
        if theta.dim() != 1 {
            return Err(AgentError::DimensionMismatch {
                expected: 1,
                found: theta.dim(),
            });
        }
        let out = ar_step(&self.env, self.z, theta, rng);
        self.z = out.emitted.as_scalar().expect("AR kernel emits scalars");
        Ok(())
    }

    fn emit(&mut self, _theta: &ParamVector, _rng: &mut RngStream) -> Result<Sample, AgentError> {
        Ok(Sample::Scalar(self.z))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityKind {
    /// `U_q(x'; x, θ) = ⟨θ, x'⟩ - ‖x' - x‖² / (2ε)`.
    Quadratic,
    /// `U_lg(x'; (x, y), θ) = y⟨θ, x'⟩ - log(1 + e^{⟨θ,x'⟩}) - ‖x' - x‖² / (2ε)`.
    Logistic,
}

/// Agent utility with its shift sensitivity ε.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Utility {
    pub kind: UtilityKind,
    pub epsilon: f64,
}

impl Utility {
    /// `epsilon = 0` is accepted for the quadratic utility only (agents do
    /// not move); the logistic best response needs `epsilon > 0`.
    pub fn new(kind: UtilityKind, epsilon: f64) -> Result<Self, AgentError> {
        let ok = epsilon.is_finite()
            && match kind {
                UtilityKind::Quadratic => epsilon >= 0.0,
                UtilityKind::Logistic => epsilon > 0.0,
            };
        if !ok {
            return Err(AgentError::Invalid(format!(
                "utility epsilon out of range: {epsilon}"
            )));
        }
        Ok(Self { kind, epsilon })
    }

    pub fn value(&self, x_new: &[f64], base: &LabeledSample, theta: &[f64]) -> f64 {
        let dev: f64 = x_new
            .iter()
            .zip(&base.features)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let u = dot(theta, x_new);
        let gain = match self.kind {
            UtilityKind::Quadratic => u,
            UtilityKind::Logistic => base.y() * u - softplus(u),
        };
        gain - dev / (2.0 * self.epsilon)
    }

    /// `∇_{x'} U(x'; base, θ)` written into `out`.
    pub fn grad_into(&self, x_new: &[f64], base: &LabeledSample, theta: &[f64], out: &mut [f64]) {
        let weight = match self.kind {
            UtilityKind::Quadratic => 1.0,
            UtilityKind::Logistic => base.y() - sigmoid(dot(theta, x_new)),
        };
        let inv_eps = 1.0 / self.epsilon;
        for (((o, t), xn), xb) in out.iter_mut().zip(theta).zip(x_new).zip(&base.features) {
            *o = weight * t - (xn - xb) * inv_eps;
        }
    }

    pub fn grad(&self, x_new: &[f64], base: &LabeledSample, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x_new.len()];
        self.grad_into(x_new, base, theta, &mut out);
        out
    }
}

/// Stopping rule for the iterative best response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerSolver {
    pub tol: f64,
    pub max_inner: usize,
}

impl Default for InnerSolver {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_inner: 10_000,
        }
    }
}

/// `argmax_{x'} U(x'; base, θ)`.
///
/// Closed form `x̄ + εθ` for [`UtilityKind::Quadratic`]. The logistic utility
/// is `(1/ε)`-strongly concave with a `(1/ε + ‖θ‖²/4)`-Lipschitz gradient;
/// it is solved by gradient ascent from `x̄` with step
/// `min(ε/2, 1/(1/ε + ‖θ‖²/4))` until `‖∇U‖ <= tol`.
pub fn best_response_exact(
    utility: &Utility,
    base: &LabeledSample,
    theta: &ParamVector,
    solver: &InnerSolver,
) -> Result<Vec<f64>, AgentError> {
    let th = theta.as_slice();
    if th.len() != base.features.len() {
        return Err(AgentError::DimensionMismatch {
            expected: base.features.len(),
            found: th.len(),
        });
    }
    let eps = utility.epsilon;
    match utility.kind {
        UtilityKind::Quadratic => Ok(base
            .features
            .iter()
            .zip(th)
            .map(|(x, t)| x + eps * t)
            .collect()),
        UtilityKind::Logistic => {
            let smooth = 1.0 / eps + norm_sq(th) / 4.0;
            let step = (eps / 2.0).min(1.0 / smooth);
            let mut x = base.features.clone();
            let mut g = vec![0.0; x.len()];
            let mut residual = f64::INFINITY;
            for _ in 0..solver.max_inner {
                utility.grad_into(&x, base, th, &mut g);
                residual = norm_sq(&g).sqrt();
                if residual <= solver.tol {
                    return Ok(x);
                }
                for (xi, gi) in x.iter_mut().zip(&g) {
                    *xi += step * gi;
                }
            }
            utility.grad_into(&x, base, th, &mut g);
            let last = norm_sq(&g).sqrt();
            if last <= solver.tol {
                return Ok(x);
            }
            Err(AgentError::InnerNonConvergence {
                iterations: solver.max_inner,
                residual: residual.min(last),
            })
        }
    }
}

fn check_base(base: &[LabeledSample]) -> Result<usize, AgentError> {
    let first = base
        .first()
        .ok_or_else(|| AgentError::Invalid("agent pool needs at least one agent".into()))?;
    let d = first.features.len();
    if d == 0 {
        return Err(AgentError::Invalid(
            "agents need at least one feature".into(),
        ));
    }
    for (i, s) in base.iter().enumerate() {
        if s.features.len() != d {
            return Err(AgentError::DimensionMismatch {
                expected: d,
                found: s.features.len(),
            });
        }
        if s.label > 1 {
            return Err(AgentError::Invalid(format!(
                "agent {i} has label {}",
                s.label
            )));
        }
        if s.features.iter().any(|v| !v.is_finite()) {
            return Err(AgentError::NonFinite { agent: i });
        }
    }
    Ok(d)
}

/// Draws `count` distinct indices into the front of `perm` by partial
/// Fisher–Yates. Any starting permutation yields a uniform subset, so the
/// buffer is reused across calls without resetting.
fn partial_shuffle<'a>(perm: &'a mut [usize], count: usize, rng: &mut RngStream) -> &'a [usize] {
    let m = perm.len();
    for j in 0..count {
        let r = rng.random_range(j..m);
        perm.swap(j, r);
    }
    &perm[..count]
}

/// Agents with memory: each holds a current feature vector that moves one
/// gradient-ascent step on its utility whenever it is selected.
#[derive(Debug, Clone)]
pub struct AgentPool {
    base: Vec<LabeledSample>,
    features: Vec<f64>,
    dim: usize,
    alpha: f64,
    participation: usize,
    utility: Utility,
    perm: Vec<usize>,
    batch_perm: Vec<usize>,
    updates: Vec<u64>,
    grad_buf: Vec<f64>,
}

impl AgentPool {
    pub fn new(
        base: Vec<LabeledSample>,
        utility: Utility,
        alpha: f64,
        participation: usize,
    ) -> Result<Self, AgentError> {
        let dim = check_base(&base)?;
        let m = base.len();
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(AgentError::Invalid(format!(
                "alpha must be > 0, got {alpha}"
            )));
        }
        if utility.epsilon <= 0.0 {
            return Err(AgentError::Invalid(
                "adapted best response needs epsilon > 0".into(),
            ));
        }
        if participation == 0 || participation > m {
            return Err(AgentError::Invalid(format!(
                "participation must lie in [1, {m}], got {participation}"
            )));
        }
        let features = base
            .iter()
            .flat_map(|s| s.features.iter().copied())
            .collect();
        Ok(Self {
            base,
            features,
            dim,
            alpha,
            participation,
            utility,
            perm: (0..m).collect(),
            batch_perm: (0..m).collect(),
            updates: vec![0; m],
            grad_buf: vec![0.0; dim],
        })
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn base(&self) -> &[LabeledSample] {
        &self.base
    }

    pub fn utility(&self) -> &Utility {
        &self.utility
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn features_of(&self, agent: usize) -> &[f64] {
        &self.features[agent * self.dim..(agent + 1) * self.dim]
    }

    pub fn all_features(&self) -> &[f64] {
        &self.features
    }

    /// Number of best-response updates agent `agent` has performed.
    pub fn update_count(&self, agent: usize) -> u64 {
        self.updates[agent]
    }

    fn sample_of(&self, agent: usize) -> Sample {
        Sample::Labeled(LabeledSample {
            features: self.features_of(agent).to_vec(),
            label: self.base[agent].label,
        })
    }

    /// Steps 1 and 2 of the adapted best-response dynamics.
    pub fn pool_step(
        &mut self,
        theta: &ParamVector,
        agent_rng: &mut RngStream,
        sample_rng: &mut RngStream,
    ) -> Result<KernelOutput, AgentError> {
        self.step(theta, agent_rng, sample_rng)
    }
}

impl Kernel for AgentPool {
    fn advance(&mut self, theta: &ParamVector, rng: &mut RngStream) -> Result<(), AgentError> {
        if theta.dim() != self.dim {
            return Err(AgentError::DimensionMismatch {
                expected: self.dim,
                found: theta.dim(),
            });
        }
        let th = theta.as_slice();
        let d = self.dim;
        let count = self.participation;
        partial_shuffle(&mut self.perm, count, rng);
        for j in 0..count {
            let i = self.perm[j];
            let x = &mut self.features[i * d..(i + 1) * d];
            self.utility
                .grad_into(x, &self.base[i], th, &mut self.grad_buf);
            for (xi, gi) in x.iter_mut().zip(&self.grad_buf) {
                *xi += self.alpha * gi;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(AgentError::NonFinite { agent: i });
            }
            self.updates[i] += 1;
        }
        Ok(())
    }

    fn emit(&mut self, _theta: &ParamVector, rng: &mut RngStream) -> Result<Sample, AgentError> {
        let i = rng.random_range(0..self.len());
        Ok(self.sample_of(i))
    }

    fn emit_batch(
        &mut self,
        theta: &ParamVector,
        count: usize,
        rng: &mut RngStream,
    ) -> Result<Vec<Sample>, AgentError> {
        if count == 1 {
            return Ok(vec![self.emit(theta, rng)?]);
        }
        if count > self.len() {
            return Err(AgentError::Invalid(format!(
                "minibatch of {count} exceeds pool size {}",
                self.len()
            )));
        }
        let mut perm = std::mem::take(&mut self.batch_perm);
        let picked: Vec<Sample> = partial_shuffle(&mut perm, count, rng)
            .iter()
            .map(|&i| self.sample_of(i))
            .collect();
        self.batch_perm = perm;
        Ok(picked)
    }
}

/// Greedy deployment on the pool: every sample is the exact best response of
/// a uniformly drawn agent to the current θ; nothing is remembered.
#[derive(Debug, Clone)]
pub struct GreedyPool {
    base: Vec<LabeledSample>,
    utility: Utility,
    solver: InnerSolver,
    batch_perm: Vec<usize>,
}

impl GreedyPool {
    pub fn new(
        base: Vec<LabeledSample>,
        utility: Utility,
        solver: InnerSolver,
    ) -> Result<Self, AgentError> {
        check_base(&base)?;
        let m = base.len();
        Ok(Self {
            base,
            utility,
            solver,
            batch_perm: (0..m).collect(),
        })
    }

    fn respond(&self, agent: usize, theta: &ParamVector) -> Result<Sample, AgentError> {
        let base = &self.base[agent];
        let x = best_response_exact(&self.utility, base, theta, &self.solver)?;
        Ok(Sample::Labeled(LabeledSample {
            features: x,
            label: base.label,
        }))
    }

    pub fn iid_step(
        &self,
        theta: &ParamVector,
        rng: &mut RngStream,
    ) -> Result<KernelOutput, AgentError> {
        let i = rng.random_range(0..self.base.len());
        Ok(KernelOutput {
            emitted: self.respond(i, theta)?,
        })
    }
}

impl Kernel for GreedyPool {
    fn advance(&mut self, _theta: &ParamVector, _rng: &mut RngStream) -> Result<(), AgentError> {
        Ok(())
    }

    fn emit(&mut self, theta: &ParamVector, rng: &mut RngStream) -> Result<Sample, AgentError> {
        Ok(self.iid_step(theta, rng)?.emitted)
    }

    fn emit_batch(
        &mut self,
        theta: &ParamVector,
        count: usize,
        rng: &mut RngStream,
    ) -> Result<Vec<Sample>, AgentError> {
        if count == 1 {
            return Ok(vec![self.emit(theta, rng)?]);
        }
        if count > self.base.len() {
            return Err(AgentError::Invalid(format!(
                "minibatch of {count} exceeds pool size {}",
                self.base.len()
            )));
        }
        let mut perm = std::mem::take(&mut self.batch_perm);
        let picked: Result<Vec<Sample>, AgentError> = partial_shuffle(&mut perm, count, rng)
            .iter()
            .map(|&i| self.respond(i, theta))
            .collect();
        self.batch_perm = perm;
        picked
    }
}

/// `θ ↦ D(θ)` as a finite empirical distribution.
pub trait DistributionMap {
    fn materialize(&self, theta: &ParamVector) -> Result<Vec<Sample>, AgentError>;
}

/// Two-point law `{m - σ, m + σ}` with `m = z̄ + εθ`: it matches the mean and
/// variance of `N(m, σ²)`, which is all the quadratic loss sees.
impl DistributionMap for GaussianEnv {
    fn materialize(&self, theta: &ParamVector) -> Result<Vec<Sample>, AgentError> {
        if theta.dim() != 1 {
            return Err(AgentError::DimensionMismatch {
                expected: 1,
                found: theta.dim(),
            });
        }
        let m = self.mean_at(theta.first());
        Ok(vec![
            Sample::Scalar(m - self.sigma),
            Sample::Scalar(m + self.sigma),
        ])
    }
}

/// Best-response distribution of a finite population: every agent replies
/// with its exact best response to θ.
#[derive(Debug, Clone)]
pub struct BestResponseLaw {
    pub base: Vec<LabeledSample>,
    pub utility: Utility,
    pub solver: InnerSolver,
}

impl BestResponseLaw {
    pub fn new(
        base: Vec<LabeledSample>,
        utility: Utility,
        solver: InnerSolver,
    ) -> Result<Self, AgentError> {
        check_base(&base)?;
        Ok(Self {
            base,
            utility,
            solver,
        })
    }
}

impl DistributionMap for BestResponseLaw {
    fn materialize(&self, theta: &ParamVector) -> Result<Vec<Sample>, AgentError> {
        self.base
            .iter()
            .map(|b| {
                let x = best_response_exact(&self.utility, b, theta, &self.solver)?;
                Ok(Sample::Labeled(LabeledSample {
                    features: x,
                    label: b.label,
                }))
            })
            .collect()
    }
}
