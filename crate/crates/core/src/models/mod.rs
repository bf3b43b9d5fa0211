//! Exactly evaluable models and the geometric-mixture path family over them.
//!
//! Every model here fixes a single datapoint `x`. The path distribution is
//! `π_β(z) ∝ q(z)^{1-β} p(x, z)^β`, whose log-normalizer `ψ(β)` is convex with
//! `ψ'(β) = η(β) = E_{π_β}[log w]` and `ψ''(β) = Var_{π_β}[log w]`.

mod curve;
mod discrete;
mod gaussian;
mod spec;

pub use curve::{ti_identity_check, MomentCurve, MomentPoint};
pub use discrete::DiscreteLatentModel;
pub use gaussian::{GaussianPath, LinearGaussianModel, DEGENERATE_CONDITION};
pub use spec::{ExactModel, ModelSpec};

use serde::Serialize;

use crate::error::Result;

/// Log-partition value and its first two derivatives at one β.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PathMoments {
    pub psi: f64,
    pub eta: f64,
    pub var: f64,
}

/// A one-parameter exponential family along the geometric path between
/// `q(z|x)` (β = 0) and the posterior `p(z|x)` (β = 1).
pub trait PathFamily {
    /// `ψ(β)`, `η(β)` and `Var_{π_β}[log w]` in one pass.
    fn moments(&self, beta: f64) -> Result<PathMoments>;

    /// `log p(x) = ψ(1) - ψ(0)`, computed without going through `ψ`.
    fn log_px(&self) -> f64;

    /// `KL[π_a || π_b]`, by enumeration or closed form.
    fn kl(&self, beta_a: f64, beta_b: f64) -> Result<f64>;

    /// Rényi bound `L_α = log p(x) - D_α[q || p(z|x)]` from the Rényi
    /// divergence directly.
    fn renyi_bound_direct(&self, alpha: f64) -> Result<f64>;

    fn psi(&self, beta: f64) -> Result<f64> {
        Ok(self.moments(beta)?.psi)
    }

    fn eta(&self, beta: f64) -> Result<f64> {
        Ok(self.moments(beta)?.eta)
    }

    fn var(&self, beta: f64) -> Result<f64> {
        Ok(self.moments(beta)?.var)
    }
}

impl<T: PathFamily + ?Sized> PathFamily for &T {
    fn moments(&self, beta: f64) -> Result<PathMoments> {
        (**self).moments(beta)
    }
    fn log_px(&self) -> f64 {
        (**self).log_px()
    }
    fn kl(&self, beta_a: f64, beta_b: f64) -> Result<f64> {
        (**self).kl(beta_a, beta_b)
    }
    fn renyi_bound_direct(&self, alpha: f64) -> Result<f64> {
        (**self).renyi_bound_direct(alpha)
    }
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() {
        Ok(())
    } else {
        Err(crate::error::TvoError::NonFiniteBeta(beta))
    }
}
