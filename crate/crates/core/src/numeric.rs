//! Shared numeric types: the learner's parameter vector, problem constants,
//! step-size schedules and the seeded random streams every run draws from.

use std::fmt;
use std::ops::Index;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericError {
    #[error("parameter vector has a non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("parameter vector must have at least one coordinate")]
    Empty,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid problem constants: {0}")]
    InvalidConstants(String),
}

/// The learner state θ. Entries are finite at construction; the solver
/// re-checks after every update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self, NumericError> {
        if values.is_empty() {
            return Err(NumericError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(NumericError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "ParamVector::zeros needs dim >= 1");
        Self(vec![0.0; dim])
    }

    pub fn scalar(value: f64) -> Result<Self, NumericError> {
        Self::new(vec![value])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// First coordinate; the Gaussian problems are one-dimensional.
    pub fn first(&self) -> f64 {
        self.0[0]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dist_sq(&self, other: &ParamVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `self <- self - step * direction`. Does not re-validate finiteness;
    /// callers that need the invariant check `is_finite` afterwards.
    pub fn descend(&mut self, step: f64, direction: &[f64]) {
        debug_assert_eq!(self.dim(), direction.len());
        for (v, g) in self.0.iter_mut().zip(direction) {
            *v -= step * g;
        }
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = NumericError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Self {
        p.0
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl fmt::Display for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "]")
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Problem constants: strong convexity `mu`, gradient Lipschitz constant,
/// distribution sensitivity ε and gradient noise level σ.
///
/// The effective modulus `mu_tilde = mu - lipschitz * sensitivity` is always
/// derived, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    mu: f64,
    lipschitz: f64,
    sensitivity: f64,
    sigma_noise: f64,
}

impl ProblemConstants {
    pub fn new(
        mu: f64,
        lipschitz: f64,
        sensitivity: f64,
        sigma_noise: f64,
    ) -> Result<Self, NumericError> {
        let all = [mu, lipschitz, sensitivity, sigma_noise];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(NumericError::InvalidConstants("non-finite value".into()));
        }
        if mu <= 0.0 {
            return Err(NumericError::InvalidConstants(format!(
                "mu must be > 0, got {mu}"
            )));
        }
        if lipschitz < 0.0 || sensitivity < 0.0 || sigma_noise < 0.0 {
            return Err(NumericError::InvalidConstants(
                "lipschitz, sensitivity and sigma_noise must be >= 0".into(),
            ));
        }
        Ok(Self {
            mu,
            lipschitz,
            sensitivity,
            sigma_noise,
        })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn sensitivity(&self) -> f64 {
        self.sensitivity
    }

    pub fn sigma_noise(&self) -> f64 {
        self.sigma_noise
    }

    pub fn mu_tilde(&self) -> f64 {
        self.mu - self.lipschitz * self.sensitivity
    }

    /// True when ε < μ/L, i.e. the rate guarantee applies.
    pub fn is_contractive(&self) -> bool {
        self.mu_tilde() > 0.0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("constant step size must be finite and > 0, got {0}")]
    InvalidConstant(f64),
    #[error("inverse schedule needs c0 > 0 and c1 >= 0, got c0={c0}, c1={c1}")]
    InvalidInverse { c0: f64, c1: f64 },
    #[error("step index must be >= 1")]
    ZeroIndex,
    #[error("horizon must be >= 2, got {0}")]
    HorizonTooShort(u64),
    #[error("gamma_cap must be finite and > 0, got {0}")]
    InvalidCap(f64),
    #[error("mu_tilde must be > 0 for the rate conditions, got {0}")]
    NotContractive(f64),
    #[error("schedule increases at k={k}: {prev} -> {next}")]
    Increasing { k: u64, prev: f64, next: f64 },
}

/// Step sizes `γ_k`, `k >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `γ_k = gamma`.
    Constant { gamma: f64 },
    /// `γ_k = c0 / (c1 + k)`.
    Inverse { c0: f64, c1: f64 },
}

impl StepSchedule {
    pub fn constant(gamma: f64) -> Result<Self, ScheduleError> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(ScheduleError::InvalidConstant(gamma));
        }
        Ok(Self::Constant { gamma })
    }

    pub fn inverse(c0: f64, c1: f64) -> Result<Self, ScheduleError> {
        if !(c0.is_finite() && c1.is_finite() && c0 > 0.0 && c1 >= 0.0) {
            return Err(ScheduleError::InvalidInverse { c0, c1 });
        }
        Ok(Self::Inverse { c0, c1 })
    }

    /// The all-zero schedule. Runs driven by it never move θ; it exists for
    /// identity checks and is rejected by [`check_schedule`].
    pub fn frozen() -> Self {
        Self::Constant { gamma: 0.0 }
    }

    /// Re-checks the construction invariants, e.g. after deserialization.
    pub fn validate(&self) -> Result<(), ScheduleError> {
        match *self {
            Self::Constant { gamma: 0.0 } => Ok(()),
            Self::Constant { gamma } => Self::constant(gamma).map(|_| ()),
            Self::Inverse { c0, c1 } => Self::inverse(c0, c1).map(|_| ()),
        }
    }

    /// `γ_k` for `k >= 1`.
    pub fn step_at(&self, k: u64) -> f64 {
        debug_assert!(k >= 1, "step index starts at 1");
        match *self {
            Self::Constant { gamma } => gamma,
            Self::Inverse { c0, c1 } => c0 / (c1 + k as f64),
        }
    }

    pub fn try_step_at(&self, k: u64) -> Result<f64, ScheduleError> {
        if k == 0 {
            return Err(ScheduleError::ZeroIndex);
        }
        Ok(self.step_at(k))
    }

    /// `γ_0`, the formula extended to `k = 0`. Infinite for `inverse(c0, 0)`.
    fn step_at_zero(&self) -> f64 {
        match *self {
            Self::Constant { gamma } => gamma,
            Self::Inverse { c0, c1 } => c0 / c1,
        }
    }
}

/// Per-step outcome of [`check_schedule`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCheck {
    pub k: u64,
    pub gamma: f64,
    pub ratio_ok: bool,
    pub cap_ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleReport {
    pub steps: Vec<StepCheck>,
    pub first_ratio_violation: Option<u64>,
    pub first_cap_violation: Option<u64>,
}

impl ScheduleReport {
    pub fn passed(&self) -> bool {
        self.first_ratio_violation.is_none() && self.first_cap_violation.is_none()
    }

    pub fn first_violation(&self) -> Option<u64> {
        match (self.first_ratio_violation, self.first_cap_violation) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

/// Checks the structurally verifiable step-size conditions of the rate
/// theorem for `k = 1..=horizon`:
///
/// * ratio condition `γ_{k-1} / γ_k <= 1 + γ_k * mu_tilde / 4`,
/// * cap `γ_k <= gamma_cap`.
///
/// `γ_0` is the schedule formula evaluated at zero, so `inverse(c0, 0)` fails
/// the ratio condition at `k = 1`. The remaining terms of the cap depend on
/// analysis-only constants and are folded into the caller's `gamma_cap`.
pub fn check_schedule(
    schedule: &StepSchedule,
    constants: &ProblemConstants,
    horizon: u64,
    gamma_cap: f64,
) -> Result<ScheduleReport, ScheduleError> {
    if horizon < 2 {
        return Err(ScheduleError::HorizonTooShort(horizon));
    }
    if !(gamma_cap.is_finite() && gamma_cap > 0.0) {
        return Err(ScheduleError::InvalidCap(gamma_cap));
    }
    let mu_tilde = constants.mu_tilde();
    if mu_tilde <= 0.0 {
        return Err(ScheduleError::NotContractive(mu_tilde));
    }
    let first = schedule.step_at(1);
    if first <= 0.0 {
        return Err(ScheduleError::InvalidConstant(first));
    }

    let mut steps = Vec::with_capacity(horizon as usize);
    let mut first_ratio_violation = None;
    let mut first_cap_violation = None;
    let mut prev = schedule.step_at_zero();
    for k in 1..=horizon {
        let gamma = schedule.step_at(k);
        if k >= 2 && gamma > prev {
            return Err(ScheduleError::Increasing {
                k,
                prev,
                next: gamma,
            });
        }
        let ratio_ok = prev / gamma <= 1.0 + gamma * mu_tilde / 4.0;
        let cap_ok = gamma <= gamma_cap;
        if !ratio_ok && first_ratio_violation.is_none() {
            first_ratio_violation = Some(k);
        }
        if !cap_ok && first_cap_violation.is_none() {
            first_cap_violation = Some(k);
        }
        steps.push(StepCheck {
            k,
            gamma,
            ratio_ok,
            cap_ok,
        });
        prev = gamma;
    }
    Ok(ScheduleReport {
        steps,
        first_ratio_violation,
        first_cap_violation,
    })
}

/// Fixed sub-stream indices within a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamRole {
    /// Agent-side transitions: pool selection, AR innovations.
    Agents = 0,
    /// Which agent(s) hand a sample to the learner; i.i.d. draws.
    Sampler = 1,
    /// Anything else a trial needs (probe draws, initial states).
    Aux = 2,
}

const ROLES_PER_TRIAL: u64 = 4;

/// Seeded ChaCha8 stream. Equal seeds and equal call sequences give
/// bit-identical outputs; sub-streams are addressed by `(trial, role)`.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn for_trial(seed: u64, trial: u64, role: StreamRole) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(trial * ROLES_PER_TRIAL + role as u64);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
