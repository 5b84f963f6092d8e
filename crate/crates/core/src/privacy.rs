//! Output perturbation with the Laplace mechanism.
//!
//! The multi-party sensitivity of regularized logistic regression is
//! `Δ = 2 / (n · k · α)`, where `k` is the smallest local dataset and `α` the
//! regularization strength. Each client adds i.i.d. `Laplace(0, Δ/ε)` noise to
//! every weight before masking, and draws fresh noise every iteration.

use rand::Rng;
use thiserror::Error;

use crate::secure_agg::ClientId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("{name} must be strictly positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyConfig {
    epsilon: f64,
    parties: usize,
    min_local_rows: usize,
    alpha_reg: f64,
}

impl PrivacyConfig {
    pub fn new(
        epsilon: f64,
        parties: usize,
        min_local_rows: usize,
        alpha_reg: f64,
    ) -> Result<Self, PrivacyError> {
        let check = |name, value: f64| {
            if value.is_finite() && value > 0.0 {
                Ok(())
            } else {
                Err(PrivacyError::NonPositive { name, value })
            }
        };
        check("epsilon", epsilon)?;
        check("party count", parties as f64)?;
        check("smallest local dataset size", min_local_rows as f64)?;
        check("alpha_reg", alpha_reg)?;
        Ok(PrivacyConfig {
            epsilon,
            parties,
            min_local_rows,
            alpha_reg,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn parties(&self) -> usize {
        self.parties
    }

    pub fn min_local_rows(&self) -> usize {
        self.min_local_rows
    }

    pub fn alpha_reg(&self) -> f64 {
        self.alpha_reg
    }

    /// Laplace scale `b = Δ / ε`.
    pub fn scale(&self) -> f64 {
        sensitivity(self) / self.epsilon
    }
}

/// `Δ = 2 / (n · k · α)`.
pub fn sensitivity(config: &PrivacyConfig) -> f64 {
    2.0 / (config.parties as f64 * config.min_local_rows as f64 * config.alpha_reg)
}

/// Inverse CDF of `Laplace(0, b)` at `u ∈ (0, 1)`.
pub fn laplace_from_uniform(scale: f64, u: f64) -> f64 {
    let centered = u - 0.5;
    -scale * centered.signum() * (1.0 - 2.0 * centered.abs()).ln()
}

/// One draw from `Laplace(0, b)`.
pub fn laplace_sample<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    // Open interval: u = 0 would map to -inf.
    let u = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    laplace_from_uniform(scale, u)
}

/// Per-weight noise for one client and iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVector {
    pub client_id: ClientId,
    pub iteration: u32,
    pub values: Vec<f64>,
}

pub fn make_noise<R: Rng + ?Sized>(
    config: &PrivacyConfig,
    weight_count: usize,
    client_id: ClientId,
    iteration: u32,
    rng: &mut R,
) -> NoiseVector {
    let b = config.scale();
    NoiseVector {
        client_id,
        iteration,
        values: (0..weight_count).map(|_| laplace_sample(b, rng)).collect(),
    }
}
