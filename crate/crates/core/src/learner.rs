//! Local L2-regularized logistic regression trained by full-batch gradient
//! descent.
//!
//! Labels are `±1`. The objective is
//! `(1/t) Σ log(1 + exp(−y·w·x)) + (α/2)‖w‖²`.

use thiserror::Error;

use crate::data::Dataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnError {
    #[error("cannot evaluate on an empty dataset")]
    EmptyDataset,

    #[error("weight length {weights} does not match feature width {features}")]
    LengthMismatch { weights: usize, features: usize },

    #[error("training diverged at local iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("invalid training config: {0}")]
    Config(&'static str),
}

/// Weight vector over the features plus intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights(pub Vec<f64>);

impl ModelWeights {
    pub fn zeros(len: usize) -> Self {
        ModelWeights(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub local_iterations: usize,
    pub alpha_reg: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            local_iterations: 250,
            alpha_reg: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LearnError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LearnError::Config("learning_rate must be positive"));
        }
        if !(self.alpha_reg >= 0.0 && self.alpha_reg.is_finite()) {
            return Err(LearnError::Config("alpha_reg must be non-negative"));
        }
        Ok(())
    }
}

/// Logistic function, evaluated without overflow for any finite input.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))`.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_shapes(w: &ModelWeights, data: &Dataset) -> Result<(), LearnError> {
    if data.is_empty() {
        return Err(LearnError::EmptyDataset);
    }
    if w.len() != data.cols() {
        return Err(LearnError::LengthMismatch {
            weights: w.len(),
            features: data.cols(),
        });
    }
    Ok(())
}

pub fn loss(w: &ModelWeights, data: &Dataset, alpha_reg: f64) -> Result<f64, LearnError> {
    check_shapes(w, data)?;
    let t = data.len() as f64;
    let data_term: f64 = data
        .rows()
        .zip(data.labels())
        .map(|(x, &y)| softplus(-y * dot(&w.0, x)))
        .sum::<f64>()
        / t;
    Ok(data_term + 0.5 * alpha_reg * dot(&w.0, &w.0))
}

pub fn gradient(w: &ModelWeights, data: &Dataset, alpha_reg: f64) -> Result<Vec<f64>, LearnError> {
    check_shapes(w, data)?;
    let mut grad = vec![0.0; w.len()];
    accumulate_gradient(&w.0, data, alpha_reg, &mut grad);
    Ok(grad)
}

fn accumulate_gradient(w: &[f64], data: &Dataset, alpha_reg: f64, grad: &mut [f64]) {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let inv_t = 1.0 / data.len() as f64;
    for (x, &y) in data.rows().zip(data.labels()) {
        let coef = -y * sigmoid(-y * dot(w, x)) * inv_t;
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += coef * xi;
        }
    }
    for (g, wi) in grad.iter_mut().zip(w) {
        *g += alpha_reg * wi;
    }
}

/// Runs exactly `config.local_iterations` descent steps from `start`.
pub fn train(
    start: &ModelWeights,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<ModelWeights, LearnError> {
    config.validate()?;
    check_shapes(start, data)?;
    let mut w = start.0.clone();
    let mut grad = vec![0.0; w.len()];
    for iteration in 0..config.local_iterations {
        accumulate_gradient(&w, data, config.alpha_reg, &mut grad);
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= config.learning_rate * g;
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(LearnError::Diverged { iteration });
        }
    }
    Ok(ModelWeights(w))
}

/// Fraud probability `σ(w·x)`.
pub fn predict(w: &ModelWeights, features: &[f64]) -> Result<f64, LearnError> {
    if w.len() != features.len() {
        return Err(LearnError::LengthMismatch {
            weights: w.len(),
            features: features.len(),
        });
    }
    Ok(sigmoid(dot(&w.0, features)))
}
