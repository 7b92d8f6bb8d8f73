//! Loss models `ℓ(θ; z)` with exact gradients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{dot, norm_sq, ParamVector};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("dimension mismatch: theta has {theta} coordinates, sample has {sample}")]
    DimensionMismatch { theta: usize, sample: usize },
    #[error("{model} loss cannot consume a {sample} sample")]
    SampleKind {
        model: &'static str,
        sample: &'static str,
    },
    #[error("dataset is empty")]
    EmptyDataset,
}

/// A labelled feature vector `z = (x, y)`, `y ∈ {0, 1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: u8,
}

impl LabeledSample {
    pub fn new(features: Vec<f64>, label: u8) -> Self {
        debug_assert!(label <= 1);
        Self { features, label }
    }

    pub fn y(&self) -> f64 {
        f64::from(self.label)
    }
}

/// One data point handed to the learner: a scalar for the Gaussian problems,
/// a labelled feature vector for classification.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Scalar(f64),
    Labeled(LabeledSample),
}

impl Sample {
    fn kind(&self) -> &'static str {
        match self {
            Sample::Scalar(_) => "scalar",
            Sample::Labeled(_) => "labeled",
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Sample::Scalar(z) => Some(*z),
            Sample::Labeled(_) => None,
        }
    }

    pub fn as_labeled(&self) -> Option<&LabeledSample> {
        match self {
            Sample::Labeled(s) => Some(s),
            Sample::Scalar(_) => None,
        }
    }
}

/// `log(1 + e^u)` without overflow.
pub fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossModel {
    /// `(z - θ)² / 2` on scalar samples; μ = L = 1.
    Quadratic,
    /// `(β/2)‖θ‖² + log(1 + e^{⟨θ,x⟩}) - y⟨θ,x⟩`; μ = β.
    RegLogistic { beta: f64 },
}

impl LossModel {
    fn name(&self) -> &'static str {
        match self {
            LossModel::Quadratic => "quadratic",
            LossModel::RegLogistic { .. } => "reg_logistic",
        }
    }

    /// Declared strong convexity modulus.
    pub fn mu(&self) -> f64 {
        match *self {
            LossModel::Quadratic => 1.0,
            LossModel::RegLogistic { beta } => beta,
        }
    }

    fn scalar_sample(&self, theta: &ParamVector, z: &Sample) -> Result<f64, LossError> {
        let Sample::Scalar(z) = z else {
            return Err(LossError::SampleKind {
                model: self.name(),
                sample: z.kind(),
            });
        };
        if theta.dim() != 1 {
            return Err(LossError::DimensionMismatch {
                theta: theta.dim(),
                sample: 1,
            });
        }
        Ok(*z)
    }

    fn labeled_sample<'a>(
        &self,
        theta: &ParamVector,
        z: &'a Sample,
    ) -> Result<&'a LabeledSample, LossError> {
        let Sample::Labeled(s) = z else {
            return Err(LossError::SampleKind {
                model: self.name(),
                sample: z.kind(),
            });
        };
        if s.features.len() != theta.dim() {
            return Err(LossError::DimensionMismatch {
                theta: theta.dim(),
                sample: s.features.len(),
            });
        }
        Ok(s)
    }

    pub fn loss(&self, theta: &ParamVector, z: &Sample) -> Result<f64, LossError> {
        match *self {
            LossModel::Quadratic => {
                let z = self.scalar_sample(theta, z)?;
                let r = z - theta.first();
                Ok(0.5 * r * r)
            }
            LossModel::RegLogistic { beta } => {
                let s = self.labeled_sample(theta, z)?;
                let u = dot(theta.as_slice(), &s.features);
                Ok(0.5 * beta * norm_sq(theta.as_slice()) + softplus(u) - s.y() * u)
            }
        }
    }

    /// Gradient in θ, written into `out` (overwritten, length `theta.dim()`).
    pub fn grad_into(
        &self,
        theta: &ParamVector,
        z: &Sample,
        out: &mut [f64],
    ) -> Result<(), LossError> {
        debug_assert_eq!(out.len(), theta.dim());
        match *self {
            LossModel::Quadratic => {
                let z = self.scalar_sample(theta, z)?;
                out[0] = theta.first() - z;
            }
            LossModel::RegLogistic { beta } => {
                let s = self.labeled_sample(theta, z)?;
                let th = theta.as_slice();
                let residual = sigmoid(dot(th, &s.features)) - s.y();
                for ((o, t), x) in out.iter_mut().zip(th).zip(&s.features) {
                    *o = beta * t + residual * x;
                }
            }
        }
        Ok(())
    }

    pub fn grad(&self, theta: &ParamVector, z: &Sample) -> Result<ParamVector, LossError> {
        let mut out = vec![0.0; theta.dim()];
        self.grad_into(theta, z, &mut out)?;
        Ok(ParamVector::from_raw(out))
    }

    /// Arithmetic mean of `grad` over an empirical distribution: the
    /// gradient of `f(θ₁; θ₂)` when `dataset` represents `D(θ₂)`.
    pub fn mean_grad(
        &self,
        theta: &ParamVector,
        dataset: &[Sample],
    ) -> Result<ParamVector, LossError> {
        if dataset.is_empty() {
            return Err(LossError::EmptyDataset);
        }
        let d = theta.dim();
        let mut acc = vec![0.0; d];
        let mut g = vec![0.0; d];
        for z in dataset {
            self.grad_into(theta, z, &mut g)?;
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += gi;
            }
        }
        let n = dataset.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(ParamVector::from_raw(acc))
    }

    pub fn mean_loss(&self, theta: &ParamVector, dataset: &[Sample]) -> Result<f64, LossError> {
        if dataset.is_empty() {
            return Err(LossError::EmptyDataset);
        }
        let mut acc = 0.0;
        for z in dataset {
            acc += self.loss(theta, z)?;
        }
        Ok(acc / dataset.len() as f64)
    }

    /// Lipschitz constant of `θ ↦ mean_grad(θ, dataset)`: 1 for the quadratic
    /// loss, `β + mean ‖x‖² / 4` for the logistic loss.
    pub fn empirical_smoothness(&self, dataset: &[Sample]) -> f64 {
        match *self {
            LossModel::Quadratic => 1.0,
            LossModel::RegLogistic { beta } => {
                let n = dataset.len().max(1) as f64;
                let sq: f64 = dataset
                    .iter()
                    .filter_map(Sample::as_labeled)
                    .map(|s| norm_sq(&s.features))
                    .sum();
                beta + sq / (4.0 * n)
            }
        }
    }
}

/// Heuristic global constants for the logistic problem, estimated from the
/// feature matrix `X` (rows = samples):
/// `L = sqrt(2βm + ‖X‖_F² / 2)` and `μ̃ = (1 - ε)β - ε‖X‖_F² / (4m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticEstimates {
    pub lipschitz: f64,
    pub mu_tilde: f64,
}

pub fn estimate_logistic_constants(
    features: &[Vec<f64>],
    beta: f64,
    epsilon: f64,
) -> LogisticEstimates {
    let m = features.len() as f64;
    let frob_sq: f64 = features.iter().map(|x| norm_sq(x)).sum();
    LogisticEstimates {
        lipschitz: (2.0 * beta * m + frob_sq / 2.0).sqrt(),
        mu_tilde: (1.0 - epsilon) * beta - epsilon * frob_sq / (4.0 * m),
    }
}
