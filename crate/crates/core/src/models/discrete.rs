use serde::Serialize;

use super::{check_beta, PathFamily, PathMoments};
use crate::error::{Result, TvoError};
use crate::numeric::{logsumexp, softmax, weighted_mean, weighted_var};

/// A latent variable with `M` enumerable states and one fixed datapoint.
///
/// Stores `log q(z|x)` and `log p(x, z)` so that path quantities stay finite
/// for log-masses far below the `f64` underflow threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscreteLatentModel {
    log_q: Vec<f64>,
    log_joint: Vec<f64>,
}

impl DiscreteLatentModel {
    /// Builds the model from probabilities `q` (summing to one) and joint masses `p(x, z)`.
    pub fn new(q: &[f64], joint: &[f64]) -> Result<Self> {
        if q.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(TvoError::InvalidModel("q entries must be positive and finite".into()));
        }
        if joint.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(TvoError::InvalidModel(
                "joint masses must be positive and finite".into(),
            ));
        }
        Self::from_log(
            q.iter().map(|v| v.ln()).collect(),
            joint.iter().map(|v| v.ln()).collect(),
        )
    }

    /// Builds the model directly from log-probabilities.
    pub fn from_log(log_q: Vec<f64>, log_joint: Vec<f64>) -> Result<Self> {
        if log_q.len() != log_joint.len() {
            return Err(TvoError::LengthMismatch {
                expected: log_q.len(),
                actual: log_joint.len(),
            });
        }
        if log_q.len() < 2 {
            return Err(TvoError::InvalidModel(format!(
                "need at least 2 latent states, got {}",
                log_q.len()
            )));
        }
        if log_q.iter().chain(&log_joint).any(|v| !v.is_finite()) {
            return Err(TvoError::InvalidModel(
                "log-probabilities must be finite (full support)".into(),
            ));
        }
        let total = logsumexp(&log_q);
        if total.abs() > 1e-12 {
            return Err(TvoError::InvalidModel(format!(
                "q must sum to 1 (log-sum = {total:e})"
            )));
        }
        Ok(Self { log_q, log_joint })
    }

    /// A model whose `q` is exactly the posterior `p(z|x)`: the integrand is flat.
    pub fn with_exact_posterior(joint: &[f64]) -> Result<Self> {
        let total: f64 = joint.iter().sum();
        let q: Vec<f64> = joint.iter().map(|p| p / total).collect();
        Self::new(&q, joint)
    }

    pub fn num_states(&self) -> usize {
        self.log_q.len()
    }

    pub fn log_q(&self) -> &[f64] {
        &self.log_q
    }

    pub fn log_joint(&self) -> &[f64] {
        &self.log_joint
    }

    /// `log w_m = log p(x, m) - log q(m)`.
    pub fn log_weights(&self) -> Vec<f64> {
        self.log_joint
            .iter()
            .zip(&self.log_q)
            .map(|(p, q)| p - q)
            .collect()
    }

    fn unnormalized(&self, beta: f64) -> Vec<f64> {
        self.log_q
            .iter()
            .zip(&self.log_joint)
            .map(|(q, p)| (1.0 - beta) * q + beta * p)
            .collect()
    }

    /// `log π_β(m)` for every state.
    pub fn log_path_probs(&self, beta: f64) -> Result<Vec<f64>> {
        check_beta(beta)?;
        let un = self.unnormalized(beta);
        let lse = logsumexp(&un);
        Ok(un.into_iter().map(|l| l - lse).collect())
    }

    /// `π_β(m)` for every state.
    pub fn path_probs(&self, beta: f64) -> Result<Vec<f64>> {
        check_beta(beta)?;
        Ok(softmax(&self.unnormalized(beta)))
    }

    /// `log p(z|x)` per state.
    pub fn log_posterior(&self) -> Vec<f64> {
        let lpx = self.log_px();
        self.log_joint.iter().map(|p| p - lpx).collect()
    }
}

impl PathFamily for DiscreteLatentModel {
    fn moments(&self, beta: f64) -> Result<PathMoments> {
        check_beta(beta)?;
        let un = self.unnormalized(beta);
        let psi = logsumexp(&un);
        let probs = softmax(&un);
        let lw = self.log_weights();
        Ok(PathMoments {
            psi,
            eta: weighted_mean(&probs, &lw),
            var: weighted_var(&probs, &lw),
        })
    }

    fn log_px(&self) -> f64 {
        logsumexp(&self.log_joint)
    }

    fn kl(&self, beta_a: f64, beta_b: f64) -> Result<f64> {
        let la = self.log_path_probs(beta_a)?;
        let lb = self.log_path_probs(beta_b)?;
        let kl: f64 = la
            .iter()
            .zip(&lb)
            .map(|(a, b)| a.exp() * (a - b))
            .sum();
        Ok(kl.max(0.0))
    }

    fn renyi_bound_direct(&self, alpha: f64) -> Result<f64> {
        check_beta(alpha)?;
        let post = self.log_posterior();
        let divergence = if alpha == 1.0 {
            self.log_q
                .iter()
                .zip(&post)
                .map(|(q, p)| q.exp() * (q - p))
                .sum::<f64>()
        } else {
            let terms: Vec<f64> = self
                .log_q
                .iter()
                .zip(&post)
                .map(|(q, p)| alpha * q + (1.0 - alpha) * p)
                .collect();
            logsumexp(&terms) / (alpha - 1.0)
        };
        Ok(self.log_px() - divergence)
    }
}
