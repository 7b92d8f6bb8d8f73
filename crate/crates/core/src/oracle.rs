//! Ground truth for θ_PS and convergence-rate estimation from traces.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{DistributionMap, GaussianEnv};
use crate::losses::LossModel;
use crate::numeric::{ParamVector, ProblemConstants, StepSchedule};
use crate::solver::{rrm_step, SolverError};

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("no performative stable point: epsilon = {0} must be < 1")]
    NoStablePoint(f64),
    #[error("repeated risk minimization is not contracting (step grew {0} times in a row)")]
    NonContraction(usize),
    #[error("fixed point not reached within {0} outer iterations")]
    OuterLimit(usize),
    #[error("self-consistency residual {residual:e} exceeds {bound:e}")]
    Residual { residual: f64, bound: f64 },
    #[error("rate fit needs at least two points in [{k_lo}, {k_hi}], found {found}")]
    TooFewPoints { k_lo: u64, k_hi: u64, found: usize },
    #[error("rate fit window is invalid: k_lo = {k_lo}, k_hi = {k_hi}")]
    BadWindow { k_lo: u64, k_hi: u64 },
    #[error("error at k = {k} is {value}, rate fit needs strictly positive errors")]
    NonPositive { k: u64, value: f64 },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

/// `θ_PS = z̄ / (1 - ε)`.
pub fn theta_ps_gaussian(env: &GaussianEnv) -> Result<f64, OracleError> {
    if env.epsilon.is_nan() || env.epsilon >= 1.0 {
        return Err(OracleError::NoStablePoint(env.epsilon));
    }
    Ok(env.z_bar / (1.0 - env.epsilon))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointTolerances {
    pub outer_tol: f64,
    pub inner_tol: f64,
    pub max_outer: usize,
}

impl Default for FixedPointTolerances {
    fn default() -> Self {
        Self {
            outer_tol: 1e-10,
            inner_tol: 1e-10,
            max_outer: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub theta: ParamVector,
    /// `‖mean_grad(θ*, D(θ*))‖`.
    pub residual: f64,
    pub outer_iters: usize,
}

/// Consecutive growing RRM steps that count as non-contraction.
const GROWTH_PATIENCE: usize = 5;

/// Runs repeated risk minimization from `theta0` until successive iterates
/// are within `outer_tol`, then certifies the result by the residual
/// `‖∇f(θ*; θ*)‖ <= 10 * inner_tol`.
pub fn theta_ps_fixed_point<D: DistributionMap + ?Sized>(
    loss: &LossModel,
    law: &D,
    theta0: &ParamVector,
    tol: &FixedPointTolerances,
) -> Result<FixedPoint, OracleError> {
    let mut theta = theta0.clone();
    let mut last_step = f64::INFINITY;
    let mut growth = 0;
    for outer in 0..tol.max_outer {
        let next = rrm_step(loss, law, &theta, tol.inner_tol, outer)?;
        let step = next.dist_sq(&theta).sqrt();
        theta = next;
        if step <= tol.outer_tol {
            let residual = loss
                .mean_grad(&theta, &law.materialize(&theta).map_err(SolverError::from)?)
                .map_err(SolverError::from)?
                .norm();
            let bound = 10.0 * tol.inner_tol;
            if residual > bound {
                return Err(OracleError::Residual { residual, bound });
            }
            return Ok(FixedPoint {
                theta,
                residual,
                outer_iters: outer + 1,
            });
        }
        if step > last_step {
            growth += 1;
            if growth >= GROWTH_PATIENCE {
                return Err(OracleError::NonContraction(growth));
            }
        } else {
            growth = 0;
        }
        last_step = step;
    }
    Err(OracleError::OuterLimit(tol.max_outer))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub k_lo: u64,
    pub k_hi: u64,
}

/// Least-squares line through `(log k, log err)` for `k ∈ [k_lo, k_hi]`.
/// `series` holds `(k, trial-averaged error)` pairs.
pub fn fit_rate(series: &[(u64, f64)], k_lo: u64, k_hi: u64) -> Result<RateFit, OracleError> {
    if k_lo < 1 || k_hi <= k_lo {
        return Err(OracleError::BadWindow { k_lo, k_hi });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(k, e) in series.iter().filter(|(k, _)| (k_lo..=k_hi).contains(k)) {
        if !e.is_finite() || e <= 0.0 {
            return Err(OracleError::NonPositive { k, value: e });
        }
        xs.push((k as f64).ln());
        ys.push(e.ln());
    }
    if xs.len() < 2 {
        return Err(OracleError::TooFewPoints {
            k_lo,
            k_hi,
            found: xs.len(),
        });
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    Ok(RateFit {
        slope,
        intercept,
        r2,
        k_lo,
        k_hi,
    })
}

/// Default window `[K/100, K]`, clamped to start at 1.
pub fn default_rate_window(horizon: u64) -> (u64, u64) {
    ((horizon / 100).max(1), horizon)
}

/// Upper bound on `E‖θ_k - θ_PS‖²` for i.i.d. sampling, obtained by
/// unrolling `Δ_{k} <= (1 - γ_k μ̃) Δ_{k-1} + 2σ²γ_k²` from `Δ_0 = delta0`.
/// Entry `k` of the result is the bound at iteration `k`.
pub fn iid_error_bound(
    constants: &ProblemConstants,
    schedule: &StepSchedule,
    delta0: f64,
    horizon: u64,
) -> Vec<f64> {
    let mu_tilde = constants.mu_tilde();
    let s2 = constants.sigma_noise().powi(2);
    let mut out = Vec::with_capacity(horizon as usize + 1);
    let mut b = delta0;
    out.push(b);
    for k in 1..=horizon {
        let g = schedule.step_at(k);
        b = (1.0 - g * mu_tilde) * b + 2.0 * s2 * g * g;
        out.push(b);
    }
    out
}
