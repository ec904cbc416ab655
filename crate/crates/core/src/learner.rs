//! Small parametric stand-in for the robot's perception models.
//!
//! Parameters are laid out as `[w_0, .., w_{d-1}, b]` and the model predicts
//! `sigmoid(w·x + b)`. Training minimizes mean squared error against
//! therapist feedback with full-batch Adadelta steps, one step per epoch.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::Zeroize;

use crate::modelstore::{Hyperparams, ModelDelta, ModelVersion};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error("dimension mismatch: model expects {expected} features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("epochs must be at least 1")]
    ZeroEpochs,
    #[error("update based on {found} but base is {expected}")]
    StaleBase { expected: String, found: String },
    #[error("no updates to average")]
    EmptyUpdates,
    #[error("weights must be positive and match the updates")]
    InvalidWeights,
    #[error("batch dump parse: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Zeroize)]
pub struct FeatureVector {
    pub id_features: Vec<f64>,
    pub bd_features: Vec<f64>,
}

impl FeatureVector {
    pub fn new(id_features: Vec<f64>, bd_features: Vec<f64>) -> Self {
        Self { id_features, bd_features }
    }

    pub fn dim(&self) -> usize {
        self.id_features.len() + self.bd_features.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.id_features.iter().chain(&self.bd_features)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Zeroize)]
pub struct TherapistFeedback {
    pub target: f64,
    pub robot_id: String,
    pub session_id: String,
    pub timestamp: u64,
}

impl TherapistFeedback {
    /// Clamps the target into [0, 1]; non-finite targets become 0.5.
    pub fn new(target: f64, robot_id: impl Into<String>, session_id: impl Into<String>, timestamp: u64) -> Self {
        let target = if target.is_finite() { target.clamp(0.0, 1.0) } else { 0.5 };
        Self {
            target,
            robot_id: robot_id.into(),
            session_id: session_id.into(),
            timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Zeroize)]
pub struct Sample {
    pub x: FeatureVector,
    pub feedback: TherapistFeedback,
}

/// Session data handed to training. Contents are wiped when dropped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingBatch(Vec<Sample>);

impl TrainingBatch {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self(samples)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Debug dump, one JSON sample per line. Not written anywhere by default.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.0 {
            let _ = writeln!(out, "{}", serde_json::to_string(s).expect("sample serializes"));
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, LearnerError> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| LearnerError::Parse(e.to_string())))
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }
}

impl Drop for TrainingBatch {
    fn drop(&mut self) {
        self.0.zeroize();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Sigmoid,
    /// Linear output, used for closed-form checks.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum UpdateRule {
    Adadelta,
    /// Plain gradient descent at the model's learning rate.
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub activation: Activation,
    pub rule: UpdateRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            activation: Activation::Sigmoid,
            rule: UpdateRule::Adadelta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub rho: f64,
    pub epsilon: f64,
    pub accumulated_grad_sq: Vec<f64>,
    pub accumulated_update_sq: Vec<f64>,
}

impl OptimizerState {
    pub fn new(dim: usize, rho: f64, epsilon: f64) -> Self {
        Self {
            rho,
            epsilon,
            accumulated_grad_sq: vec![0.0; dim],
            accumulated_update_sq: vec![0.0; dim],
        }
    }

    pub fn for_model(model: &ModelVersion) -> Self {
        Self::new(model.dim(), model.hyperparams.rho, model.hyperparams.epsilon)
    }

    /// One Adadelta step; returns the (unscaled) update.
    fn adadelta_step(&mut self, grad: &[f64]) -> Vec<f64> {
        let (rho, eps) = (self.rho, self.epsilon);
        grad.iter()
            .zip(self.accumulated_grad_sq.iter_mut())
            .zip(self.accumulated_update_sq.iter_mut())
            .map(|((g, eg2), edx2)| {
                *eg2 = rho * *eg2 + (1.0 - rho) * g * g;
                let dx = -((*edx2 + eps).sqrt() / (*eg2 + eps).sqrt()) * g;
                *edx2 = rho * *edx2 + (1.0 - rho) * dx * dx;
                dx
            })
            .collect()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_dim(params: &[f64], x: &FeatureVector) -> Result<(), LearnerError> {
    if params.len() != x.dim() + 1 {
        return Err(LearnerError::DimensionMismatch {
            expected: params.len().saturating_sub(1),
            got: x.dim(),
        });
    }
    Ok(())
}

fn linear(params: &[f64], x: &FeatureVector) -> f64 {
    let (w, b) = params.split_at(params.len() - 1);
    w.iter().zip(x.iter()).map(|(w, x)| w * x).sum::<f64>() + b[0]
}

pub fn predict_params(params: &[f64], x: &FeatureVector, activation: Activation) -> Result<f64, LearnerError> {
    check_dim(params, x)?;
    let z = linear(params, x);
    Ok(match activation {
        Activation::Sigmoid => sigmoid(z),
        Activation::Identity => z,
    })
}

pub fn predict(model: &ModelVersion, x: &FeatureVector) -> Result<f64, LearnerError> {
    predict_params(&model.params, x, Activation::Sigmoid)
}

pub fn mse(params: &[f64], samples: &[Sample], activation: Activation) -> Result<f64, LearnerError> {
    if samples.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    let mut total = 0.0;
    for s in samples {
        let e = predict_params(params, &s.x, activation)? - s.feedback.target;
        total += e * e;
    }
    Ok(total / samples.len() as f64)
}

/// Analytic gradient of the batch MSE with respect to `[w, b]`.
pub fn gradient(params: &[f64], samples: &[Sample], activation: Activation) -> Result<Vec<f64>, LearnerError> {
    if samples.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    let mut grad = vec![0.0; params.len()];
    let scale = 2.0 / samples.len() as f64;
    for s in samples {
        let p = predict_params(params, &s.x, activation)?;
        let dz = match activation {
            Activation::Sigmoid => p * (1.0 - p),
            Activation::Identity => 1.0,
        };
        let coef = scale * (p - s.feedback.target) * dz;
        for (g, x) in grad.iter_mut().zip(s.x.iter()) {
            *g += coef * x;
        }
        *grad.last_mut().expect("bias slot") += coef;
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FineTuneOutcome {
    pub model: ModelVersion,
    pub optimizer: OptimizerState,
    /// Batch loss before training followed by the loss after each epoch.
    pub losses: Vec<f64>,
}

/// Trains on `batch` for `epochs` full-batch steps. The batch is consumed
/// and wiped before returning. The result is an uncommitted child of `model`.
pub fn fine_tune(
    model: &ModelVersion,
    batch: TrainingBatch,
    mut opt: OptimizerState,
    epochs: u32,
    config: TrainConfig,
    created_at: u64,
) -> Result<FineTuneOutcome, LearnerError> {
    if batch.is_empty() {
        return Err(LearnerError::EmptyBatch);
    }
    if epochs == 0 {
        return Err(LearnerError::ZeroEpochs);
    }
    let samples = batch.samples();
    check_dim(&model.params, &samples[0].x)?;
    let lr = model.hyperparams.learning_rate;
    let mut params = model.params.clone();
    let mut losses = Vec::with_capacity(epochs as usize + 1);
    losses.push(mse(&params, samples, config.activation)?);
    for _ in 0..epochs {
        let grad = gradient(&params, samples, config.activation)?;
        match config.rule {
            UpdateRule::Adadelta => {
                for (p, dx) in params.iter_mut().zip(opt.adadelta_step(&grad)) {
                    *p += lr * dx;
                }
            }
            UpdateRule::Sgd => {
                for (p, g) in params.iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
            }
        }
        losses.push(mse(&params, samples, config.activation)?);
    }
    drop(batch);
    Ok(FineTuneOutcome {
        model: ModelVersion::new(params, model.hyperparams, Some(model.version_id), created_at),
        optimizer: opt,
        losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub score: f64,
}

/// Maps a loss to a feedback score in (0, 1].
pub fn score_from_loss(loss: f64) -> f64 {
    1.0 / (1.0 + loss)
}

pub fn evaluate(model: &ModelVersion, samples: &[Sample]) -> Result<Evaluation, LearnerError> {
    let loss = mse(&model.params, samples, Activation::Sigmoid)?;
    Ok(Evaluation {
        loss,
        score: score_from_loss(loss),
    })
}

/// Weighted mean of updates applied to `base`. Computed as
/// `d_0 + Σ w_i (d_i − d_0) / Σ w_i` so identical updates average exactly.
pub fn federated_average(
    base: &ModelVersion,
    updates: &[ModelDelta],
    weights: &[f64],
    created_at: u64,
) -> Result<ModelVersion, LearnerError> {
    let first = updates.first().ok_or(LearnerError::EmptyUpdates)?;
    if weights.len() != updates.len() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(LearnerError::InvalidWeights);
    }
    for u in updates {
        if u.from_id != base.version_id {
            return Err(LearnerError::StaleBase {
                expected: base.version_id.to_string(),
                found: u.from_id.to_string(),
            });
        }
        if u.dim() != base.dim() {
            return Err(LearnerError::DimensionMismatch {
                expected: base.dim(),
                got: u.dim(),
            });
        }
    }
    let total: f64 = weights.iter().sum();
    let params = base
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let anchor = first.param_diff[i];
            let spread: f64 = updates
                .iter()
                .zip(weights)
                .map(|(u, w)| w * (u.param_diff[i] - anchor))
                .sum();
            p + (anchor + spread / total)
        })
        .collect();
    Ok(ModelVersion::new(params, base.hyperparams, Some(base.version_id), created_at))
}

/// Default hyperparameters for scenario models.
pub fn default_hyperparams(epochs: u32) -> Hyperparams {
    Hyperparams {
        epochs,
        ..Hyperparams::default()
    }
}
