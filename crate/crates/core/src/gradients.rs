//! Gradient estimators for expectations under `π_β` on the linear-Gaussian model.
//!
//! Generative parameters `θ = (A, b, log σ)` always use the covariance
//! (score-function) estimator. Encoder parameters `φ = (m, log t)` can also use
//! the doubly-reparameterized estimator, which differentiates through
//! `z = m + t ⊙ ε`.
//!
//! Every estimator works on a weighted set of `ε` atoms: Monte Carlo draws
//! with equal base weights, or a Gauss–Hermite grid whose weights turn the
//! same code into a deterministic quadrature.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bounds::tvo_lower;
use crate::error::{Result, TvoError};
use crate::models::{LinearGaussianModel, PathFamily};
use crate::numeric::{gauss_hermite_standard, softmax};
use crate::schedules::Schedule;

/// Gauss–Hermite nodes per latent dimension for deterministic checks.
pub const QUADRATURE_NODES: usize = 64;

/// Flat parameter vectors. Layouts: `θ = [A (row-major), b, log σ]`,
/// `φ = [m, log t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
}

impl ParamVector {
    pub fn of(model: &LinearGaussianModel) -> Self {
        let a = &model.decoder_weight;
        let mut theta = Vec::with_capacity(a.len() + a.nrows() + 1);
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                theta.push(a[(i, j)]);
            }
        }
        theta.extend(model.decoder_bias.iter());
        theta.push(model.obs_stddev.ln());
        let mut phi: Vec<f64> = model.encoder_mean.iter().copied().collect();
        phi.extend(model.encoder_stddev.iter().map(|t| t.ln()));
        Self { theta, phi }
    }

    /// Rebuilds a model with the dimensions of `like`.
    pub fn to_model(&self, like: &LinearGaussianModel) -> Result<LinearGaussianModel> {
        let (dx, dz) = like.decoder_weight.shape();
        if self.theta.len() != dx * dz + dx + 1 {
            return Err(TvoError::LengthMismatch {
                expected: dx * dz + dx + 1,
                actual: self.theta.len(),
            });
        }
        if self.phi.len() != 2 * dz {
            return Err(TvoError::LengthMismatch {
                expected: 2 * dz,
                actual: self.phi.len(),
            });
        }
        if self.theta.iter().chain(&self.phi).any(|v| !v.is_finite()) {
            return Err(TvoError::InvalidModel("non-finite parameter".into()));
        }
        let a = DMatrix::from_row_slice(dx, dz, &self.theta[..dx * dz]);
        let b = DVector::from_column_slice(&self.theta[dx * dz..dx * dz + dx]);
        let sigma = self.theta[dx * dz + dx].exp();
        let m = DVector::from_column_slice(&self.phi[..dz]);
        let t = DVector::from_iterator(dz, self.phi[dz..].iter().map(|v| v.exp()));
        LinearGaussianModel::new(a, b, sigma, m, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorTag {
    Reinforce,
    DoublyReparam,
    GenericReparam,
    FiniteDiff,
}

/// Gradient of some `π_β` expectation with respect to `θ` and `φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradEstimate {
    pub d_theta: Vec<f64>,
    pub d_phi: Vec<f64>,
    pub estimator_tag: EstimatorTag,
}

impl GradEstimate {
    pub fn max_abs_diff(&self, other: &GradEstimate) -> f64 {
        self.d_theta
            .iter()
            .zip(&other.d_theta)
            .chain(self.d_phi.iter().zip(&other.d_phi))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.d_theta
            .iter()
            .chain(&self.d_phi)
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Analytic test functions `f(z)` with known partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunction {
    Constant(f64),
    LogW,
    /// `z_j`.
    Coordinate(usize),
    LogWSquared,
}

impl FromStr for TestFunction {
    type Err = TvoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log_w" => Ok(TestFunction::LogW),
            "log_w_squared" => Ok(TestFunction::LogWSquared),
            _ => {
                if let Some(j) = s.strip_prefix('z').and_then(|j| j.parse().ok()) {
                    Ok(TestFunction::Coordinate(j))
                } else if let Some(c) = s.strip_prefix("const:").and_then(|c| c.parse().ok()) {
                    Ok(TestFunction::Constant(c))
                } else {
                    Err(TvoError::UnsupportedModel("unknown test function"))
                }
            }
        }
    }
}

impl fmt::Display for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestFunction::Constant(c) => write!(f, "const:{c}"),
            TestFunction::LogW => write!(f, "log_w"),
            TestFunction::Coordinate(j) => write!(f, "z{j}"),
            TestFunction::LogWSquared => write!(f, "log_w_squared"),
        }
    }
}

/// Weighted `ε` atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct Atoms {
    eps: Vec<DVector<f64>>,
    log_base: Vec<f64>,
}

impl Atoms {
    /// `s` draws of `ε ~ N(0, I)` with equal weights.
    pub fn sample<R: Rng + ?Sized>(latent_dim: usize, s: usize, rng: &mut R) -> Self {
        let eps = (0..s)
            .map(|_| DVector::from_fn(latent_dim, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self {
            eps,
            log_base: vec![0.0; s],
        }
    }

    /// Tensor-product Gauss–Hermite grid with `nodes` points per dimension.
    pub fn gauss_hermite(latent_dim: usize, nodes: usize) -> Self {
        let (x, w) = gauss_hermite_standard(nodes);
        let total = nodes.pow(latent_dim as u32);
        let mut eps = Vec::with_capacity(total);
        let mut log_base = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut e = DVector::zeros(latent_dim);
            let mut lw = 0.0;
            for d in 0..latent_dim {
                let idx = rem % nodes;
                rem /= nodes;
                e[d] = x[idx];
                lw += w[idx].ln();
            }
            eps.push(e);
            log_base.push(lw);
        }
        Self { eps, log_base }
    }

    /// Gauss–Hermite grid centred on `π_β` itself, mapped to `ε` space.
    ///
    /// Base weights carry the ratio `N(ε; 0, I) / N(ε; c, C)`, so the atoms
    /// still integrate against the standard normal while resolving a `π_β`
    /// much narrower or wider than `q`.
    pub fn adapted(model: &LinearGaussianModel, x: &DVector<f64>, beta: f64, nodes: usize) -> Result<Self> {
        let g = model.path(x.clone())?.path_gaussian(beta)?;
        let dz = model.latent_dim();
        let t = &model.encoder_stddev;
        let centre = (&g.mean - &model.encoder_mean).component_div(t);
        let cov = DMatrix::from_fn(dz, dz, |i, j| g.cov[(i, j)] / (t[i] * t[j]));
        let chol = cov
            .cholesky()
            .ok_or(TvoError::DegenerateCovariance { beta, condition: f64::INFINITY })?;
        let l = chol.l();
        let log_det_l: f64 = l.diagonal().iter().map(|v| v.ln()).sum();
        let grid = Self::gauss_hermite(dz, nodes);
        let mut eps = Vec::with_capacity(grid.len());
        let mut log_base = Vec::with_capacity(grid.len());
        for (u, lw) in grid.eps.iter().zip(&grid.log_base) {
            let e = &centre + &l * u;
            // log N(ε; 0, I) - log N(ε; c, C), the 2π terms cancel
            log_base.push(lw - 0.5 * e.norm_squared() + 0.5 * u.norm_squared() + log_det_l);
            eps.push(e);
        }
        Ok(Self { eps, log_base })
    }

    pub fn from_eps(eps: Vec<DVector<f64>>) -> Self {
        let n = eps.len();
        Self {
            eps,
            log_base: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps.is_empty()
    }

    pub fn eps(&self) -> &[DVector<f64>] {
        &self.eps
    }
}

/// Per-atom quantities shared by every estimator.
#[derive(Debug, Clone)]
struct AtomTerms {
    z: DVector<f64>,
    log_w: f64,
    grad_z_log_w: DVector<f64>,
    /// `∂ log q / ∂φ` at fixed `z`.
    score_q: Vec<f64>,
    /// `∂ log p(x, z) / ∂θ` at fixed `z`.
    score_p: Vec<f64>,
    /// `(∂z/∂φ)ᵀ ∂ log w / ∂z`.
    path_grad: Vec<f64>,
    eps: DVector<f64>,
}

/// Atoms evaluated on one model and datapoint, ready for reweighting at any β.
#[derive(Debug, Clone)]
pub struct EvaluatedAtoms {
    model: LinearGaussianModel,
    log_base: Vec<f64>,
    terms: Vec<AtomTerms>,
}

fn score_p(model: &LinearGaussianModel, x: &DVector<f64>, z: &DVector<f64>) -> Vec<f64> {
    let (dx, dz) = model.decoder_weight.shape();
    let s2 = model.obs_stddev * model.obs_stddev;
    let r = x - &model.decoder_weight * z - &model.decoder_bias;
    let mut out = Vec::with_capacity(dx * dz + dx + 1);
    for i in 0..dx {
        for j in 0..dz {
            out.push(r[i] * z[j] / s2);
        }
    }
    out.extend(r.iter().map(|ri| ri / s2));
    out.push(r.norm_squared() / s2 - dx as f64);
    out
}

fn score_q(model: &LinearGaussianModel, z: &DVector<f64>) -> Vec<f64> {
    let dz = model.latent_dim();
    let mut out = Vec::with_capacity(2 * dz);
    for j in 0..dz {
        let t = model.encoder_stddev[j];
        out.push((z[j] - model.encoder_mean[j]) / (t * t));
    }
    for j in 0..dz {
        let t = model.encoder_stddev[j];
        let u = (z[j] - model.encoder_mean[j]) / t;
        out.push(u * u - 1.0);
    }
    out
}

/// `(∂z/∂φ)ᵀ v` for `z = m + t ⊙ ε` with `φ = [m, log t]`.
fn pull_back(model: &LinearGaussianModel, eps: &DVector<f64>, v: &DVector<f64>) -> Vec<f64> {
    let dz = model.latent_dim();
    let mut out = Vec::with_capacity(2 * dz);
    out.extend(v.iter());
    for j in 0..dz {
        out.push(v[j] * model.encoder_stddev[j] * eps[j]);
    }
    out
}

impl EvaluatedAtoms {
    pub fn new(model: &LinearGaussianModel, x: &DVector<f64>, atoms: &Atoms) -> Result<Self> {
        if x.len() != model.obs_dim() {
            return Err(TvoError::LengthMismatch {
                expected: model.obs_dim(),
                actual: x.len(),
            });
        }
        if let Some(e) = atoms.eps.iter().find(|e| e.len() != model.latent_dim()) {
            return Err(TvoError::LengthMismatch {
                expected: model.latent_dim(),
                actual: e.len(),
            });
        }
        let terms = atoms
            .eps
            .iter()
            .map(|eps| {
                let z = model.reparameterize(eps);
                let grad_z_log_w = model.grad_z_log_w(x, &z);
                AtomTerms {
                    log_w: model.log_w(x, &z),
                    score_q: score_q(model, &z),
                    score_p: score_p(model, x, &z),
                    path_grad: pull_back(model, eps, &grad_z_log_w),
                    grad_z_log_w,
                    z,
                    eps: eps.clone(),
                }
            })
            .collect();
        Ok(Self {
            model: model.clone(),
            log_base: atoms.log_base.clone(),
            terms,
        })
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.terms.iter().map(|t| t.log_w).collect()
    }

    /// Normalized `π_β` weights of the atoms.
    pub fn path_weights(&self, beta: f64) -> Vec<f64> {
        let logits: Vec<f64> = self
            .terms
            .iter()
            .zip(&self.log_base)
            .map(|(t, b)| b + beta * t.log_w)
            .collect();
        softmax(&logits)
    }

    /// `(f, ∂f/∂z, ∂f/∂φ|_z, ∂f/∂θ|_z)` at one atom.
    fn test_terms(&self, t: &AtomTerms, f: TestFunction) -> (f64, DVector<f64>, Vec<f64>, Vec<f64>) {
        let dz = self.model.latent_dim();
        let n_theta = t.score_p.len();
        let n_phi = t.score_q.len();
        match f {
            TestFunction::Constant(c) => (c, DVector::zeros(dz), vec![0.0; n_phi], vec![0.0; n_theta]),
            TestFunction::LogW => (
                t.log_w,
                t.grad_z_log_w.clone(),
                t.score_q.iter().map(|s| -s).collect(),
                t.score_p.clone(),
            ),
            TestFunction::Coordinate(j) => {
                let mut e = DVector::zeros(dz);
                e[j] = 1.0;
                (t.z[j], e, vec![0.0; n_phi], vec![0.0; n_theta])
            }
            TestFunction::LogWSquared => {
                let two_lw = 2.0 * t.log_w;
                (
                    t.log_w * t.log_w,
                    &t.grad_z_log_w * two_lw,
                    t.score_q.iter().map(|s| -two_lw * s).collect(),
                    t.score_p.iter().map(|s| two_lw * s).collect(),
                )
            }
        }
    }

    fn check(&self, f: TestFunction, min_atoms: usize) -> Result<()> {
        if self.terms.len() < min_atoms {
            return Err(TvoError::TooFewSamples {
                needed: min_atoms,
                got: self.terms.len(),
            });
        }
        if let TestFunction::Coordinate(j) = f {
            if j >= self.model.latent_dim() {
                return Err(TvoError::UnsupportedModel("coordinate beyond latent dimension"));
            }
        }
        Ok(())
    }

    /// Covariance estimator for `θ`: `E[∂f/∂θ] + β Cov[f, ∂ log p/∂θ]`.
    fn theta_covariance(&self, probs: &[f64], beta: f64, f: TestFunction) -> Vec<f64> {
        let n = self.terms[0].score_p.len();
        let evals: Vec<_> = self.terms.iter().map(|t| self.test_terms(t, f)).collect();
        let f_mean: f64 = probs.iter().zip(&evals).map(|(p, e)| p * e.0).sum();
        (0..n)
            .map(|k| {
                let s_mean: f64 = probs.iter().zip(&self.terms).map(|(p, t)| p * t.score_p[k]).sum();
                let mut direct = 0.0;
                let mut cov = 0.0;
                for ((p, t), e) in probs.iter().zip(&self.terms).zip(&evals) {
                    direct += p * e.3[k];
                    cov += p * (e.0 - f_mean) * (t.score_p[k] - s_mean);
                }
                direct + beta * cov
            })
            .collect()
    }

    /// Covariance (REINFORCE-style) estimator for both parameter groups.
    pub fn reinforce(&self, beta: f64, f: TestFunction) -> Result<GradEstimate> {
        self.check(f, 2)?;
        let probs = self.path_weights(beta);
        let evals: Vec<_> = self.terms.iter().map(|t| self.test_terms(t, f)).collect();
        let f_mean: f64 = probs.iter().zip(&evals).map(|(p, e)| p * e.0).sum();
        let n_phi = self.terms[0].score_q.len();
        let d_phi = (0..n_phi)
            .map(|k| {
                let s_mean: f64 = probs.iter().zip(&self.terms).map(|(p, t)| p * t.score_q[k]).sum();
                let mut direct = 0.0;
                let mut cov = 0.0;
                for ((p, t), e) in probs.iter().zip(&self.terms).zip(&evals) {
                    direct += p * e.2[k];
                    cov += p * (e.0 - f_mean) * (t.score_q[k] - s_mean);
                }
                direct + (1.0 - beta) * cov
            })
            .collect();
        Ok(GradEstimate {
            d_theta: self.theta_covariance(&probs, beta, f),
            d_phi,
            estimator_tag: EstimatorTag::Reinforce,
        })
    }

    /// Doubly-reparameterized estimator of `d/dφ E_{π_β}[log w]`; `θ` uses the
    /// covariance estimator.
    pub fn doubly_reparam(&self, beta: f64) -> Result<GradEstimate> {
        self.check(TestFunction::LogW, 1)?;
        let probs = self.path_weights(beta);
        let (lead, cov_coef) = doubly_reparam_coefficients(beta);
        let lw_mean: f64 = probs.iter().zip(&self.terms).map(|(p, t)| p * t.log_w).sum();
        let n_phi = self.terms[0].path_grad.len();
        let d_phi = (0..n_phi)
            .map(|k| {
                let g_mean: f64 = probs.iter().zip(&self.terms).map(|(p, t)| p * t.path_grad[k]).sum();
                let cov: f64 = probs
                    .iter()
                    .zip(&self.terms)
                    .map(|(p, t)| p * (t.log_w - lw_mean) * (t.path_grad[k] - g_mean))
                    .sum();
                lead * g_mean + cov_coef * cov
            })
            .collect();
        Ok(GradEstimate {
            d_theta: self.theta_covariance(&probs, beta, TestFunction::LogW),
            d_phi,
            estimator_tag: EstimatorTag::DoublyReparam,
        })
    }

    /// Reparameterized estimator for general `f`:
    /// `E[df/dφ - β (∂z/∂φ)(∂f/∂z)] + β(1-β) Cov[f, (∂z/∂φ)(∂ log w/∂z)]`.
    pub fn generic_reparam(&self, beta: f64, f: TestFunction) -> Result<GradEstimate> {
        self.check(f, 1)?;
        let probs = self.path_weights(beta);
        let evals: Vec<_> = self.terms.iter().map(|t| self.test_terms(t, f)).collect();
        let f_mean: f64 = probs.iter().zip(&evals).map(|(p, e)| p * e.0).sum();
        let n_phi = self.terms[0].path_grad.len();
        // total derivative df/dφ = (∂z/∂φ)(∂f/∂z) + ∂f/∂φ|_z
        let pulled: Vec<Vec<f64>> = self
            .terms
            .iter()
            .zip(&evals)
            .map(|(t, e)| pull_back(&self.model, &t.eps, &e.1))
            .collect();
        let d_phi = (0..n_phi)
            .map(|k| {
                let g_mean: f64 = probs.iter().zip(&self.terms).map(|(p, t)| p * t.path_grad[k]).sum();
                let mut first = 0.0;
                let mut cov = 0.0;
                for (((p, t), e), pb) in probs.iter().zip(&self.terms).zip(&evals).zip(&pulled) {
                    first += p * ((1.0 - beta) * pb[k] + e.2[k]);
                    cov += p * (e.0 - f_mean) * (t.path_grad[k] - g_mean);
                }
                first + beta * (1.0 - beta) * cov
            })
            .collect();
        Ok(GradEstimate {
            d_theta: self.theta_covariance(&probs, beta, f),
            d_phi,
            estimator_tag: EstimatorTag::GenericReparam,
        })
    }

    /// Gradient of `TVO_L = Σ_k Δβ_k η(β_{k-1})` with the schedule held fixed.
    ///
    /// `θ` uses the covariance estimator and `φ` the doubly-reparameterized one.
    pub fn tvo_lower_gradient(&self, schedule: &Schedule) -> Result<GradEstimate> {
        let mut d_theta = vec![0.0; self.terms[0].score_p.len()];
        let mut d_phi = vec![0.0; self.terms[0].path_grad.len()];
        for (w, width) in schedule.betas().windows(2).zip(schedule.widths()) {
            let g = self.doubly_reparam(w[0])?;
            for (acc, v) in d_theta.iter_mut().zip(&g.d_theta) {
                *acc += width * v;
            }
            for (acc, v) in d_phi.iter_mut().zip(&g.d_phi) {
                *acc += width * v;
            }
        }
        Ok(GradEstimate {
            d_theta,
            d_phi,
            estimator_tag: EstimatorTag::DoublyReparam,
        })
    }

    /// Reparameterized gradient of the IWAE bound `log (1/S) Σ w_i`.
    pub fn iwae_gradient(&self) -> Result<GradEstimate> {
        self.check(TestFunction::LogW, 1)?;
        let probs = self.path_weights(1.0);
        let n_theta = self.terms[0].score_p.len();
        let n_phi = self.terms[0].path_grad.len();
        let mut d_theta = vec![0.0; n_theta];
        let mut d_phi = vec![0.0; n_phi];
        for (p, t) in probs.iter().zip(&self.terms) {
            for k in 0..n_theta {
                d_theta[k] += p * t.score_p[k];
            }
            for k in 0..n_phi {
                d_phi[k] += p * (t.path_grad[k] - t.score_q[k]);
            }
        }
        Ok(GradEstimate {
            d_theta,
            d_phi,
            estimator_tag: EstimatorTag::GenericReparam,
        })
    }
}

/// `(1 - 2β, β(1 - β))`: leading and covariance coefficients of the
/// doubly-reparameterized estimator.
pub fn doubly_reparam_coefficients(beta: f64) -> (f64, f64) {
    (1.0 - 2.0 * beta, beta * (1.0 - beta))
}

fn check_unit_beta(beta: f64) -> Result<()> {
    if !beta.is_finite() {
        return Err(TvoError::NonFiniteBeta(beta));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(TvoError::BetaOutOfRange(beta, "[0, 1]"));
    }
    Ok(())
}

/// Covariance estimator of `d/dλ E_{π_β}[log w]`.
pub fn reinforce_grad(model: &LinearGaussianModel, x: &DVector<f64>, beta: f64, atoms: &Atoms) -> Result<GradEstimate> {
    check_unit_beta(beta)?;
    EvaluatedAtoms::new(model, x, atoms)?.reinforce(beta, TestFunction::LogW)
}

/// Doubly-reparameterized estimator of `d/dφ E_{π_β}[log w]`.
pub fn doubly_reparam_grad(
    model: &LinearGaussianModel,
    x: &DVector<f64>,
    beta: f64,
    atoms: &Atoms,
) -> Result<GradEstimate> {
    check_unit_beta(beta)?;
    EvaluatedAtoms::new(model, x, atoms)?.doubly_reparam(beta)
}

/// Reparameterized estimator of `d/dφ E_{π_β}[f]` for an analytic test function.
pub fn generic_reparam_grad(
    model: &LinearGaussianModel,
    x: &DVector<f64>,
    beta: f64,
    f: TestFunction,
    atoms: &Atoms,
) -> Result<GradEstimate> {
    check_unit_beta(beta)?;
    EvaluatedAtoms::new(model, x, atoms)?.generic_reparam(beta, f)
}

/// Closed-form quantity differentiated by [`finite_diff_grad`].
#[derive(Debug, Clone, PartialEq)]
pub enum FdTarget {
    Eta,
    Psi,
    TvoLower(Schedule),
    Expectation(TestFunction),
}

/// Closed-form value of `target` for the given model and datapoint.
pub fn target_value(model: &LinearGaussianModel, x: &DVector<f64>, beta: f64, target: &FdTarget) -> Result<f64> {
    let path = model.path(x.clone())?;
    match target {
        FdTarget::Eta => path.eta(beta),
        FdTarget::Psi => path.psi(beta),
        FdTarget::TvoLower(s) => {
            let etas = s.betas().iter().map(|&b| path.eta(b)).collect::<Result<Vec<_>>>()?;
            tvo_lower(&etas, s)
        }
        FdTarget::Expectation(f) => match *f {
            TestFunction::Constant(c) => Ok(c),
            TestFunction::LogW => path.eta(beta),
            TestFunction::Coordinate(j) => {
                let g = path.path_gaussian(beta)?;
                g.mean
                    .get(j)
                    .copied()
                    .ok_or(TvoError::UnsupportedModel("coordinate beyond latent dimension"))
            }
            TestFunction::LogWSquared => {
                let m = path.moments(beta)?;
                Ok(m.var + m.eta * m.eta)
            }
        },
    }
}

/// Relative step used by the central differences.
pub const FD_STEP: f64 = 1e-5;

/// Central differences of a closed-form target, step `1e-5 · max(1, |param|)`.
pub fn finite_diff_grad(
    model: &LinearGaussianModel,
    x: &DVector<f64>,
    beta: f64,
    target: &FdTarget,
) -> Result<GradEstimate> {
    let base = ParamVector::of(model);
    let eval = |p: &ParamVector| -> Result<f64> { target_value(&p.to_model(model)?, x, beta, target) };
    let diff = |which: fn(&mut ParamVector) -> &mut Vec<f64>, k: usize| -> Result<f64> {
        let mut plus = base.clone();
        let mut minus = base.clone();
        let v = which(&mut plus)[k];
        let h = FD_STEP * v.abs().max(1.0);
        which(&mut plus)[k] = v + h;
        which(&mut minus)[k] = v - h;
        Ok((eval(&plus)? - eval(&minus)?) / (2.0 * h))
    };
    let d_theta = (0..base.theta.len())
        .map(|k| diff(|p| &mut p.theta, k))
        .collect::<Result<Vec<_>>>()?;
    let d_phi = (0..base.phi.len())
        .map(|k| diff(|p| &mut p.phi, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradEstimate {
        d_theta,
        d_phi,
        estimator_tag: EstimatorTag::FiniteDiff,
    })
}

/// Largest absolute residual of each reparameterization identity over the `φ`
/// coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LemmaResiduals {
    /// `E[f · d log w/dφ] = E[(∂z/∂φ)((1-β) f ∂ log w/∂z - ∂f/∂z)]`.
    pub lemma1: f64,
    /// The `f = 1` case: `E[d log w/dφ] = (1-β) E[(∂z/∂φ)(∂ log w/∂z)]`.
    pub corollary1: f64,
    /// `dZ_β/dφ = β(1-β) E_ε[w^β (∂z/∂φ)(∂ log w/∂z)]`.
    pub lemma2: f64,
}

impl LemmaResiduals {
    pub fn max(&self) -> f64 {
        self.lemma1.max(self.corollary1).max(self.lemma2)
    }
}

/// Checks the three reparameterization identities with Gauss–Hermite
/// quadrature centred on `π_β`; every `d/dφ` on a left side is a central
/// finite difference.
pub fn lemma_checks(model: &LinearGaussianModel, x: &DVector<f64>, beta: f64, f: TestFunction) -> Result<LemmaResiduals> {
    check_unit_beta(beta)?;
    let atoms = Atoms::adapted(model, x, beta, QUADRATURE_NODES)?;
    let eval = EvaluatedAtoms::new(model, x, &atoms)?;
    eval.check(f, 1)?;
    let probs = eval.path_weights(beta);
    let base = ParamVector::of(model);
    let n_phi = base.phi.len();

    // per-atom total derivative d/dφ log w(z(ε, φ); φ) at fixed ε
    let total_dlogw: Vec<Vec<f64>> = atoms
        .eps
        .iter()
        .map(|eps| {
            (0..n_phi)
                .map(|k| {
                    let v = base.phi[k];
                    let h = FD_STEP * v.abs().max(1.0);
                    let at = |delta: f64| -> Result<f64> {
                        let mut p = base.clone();
                        p.phi[k] = v + delta;
                        let m = p.to_model(model)?;
                        Ok(m.log_w(x, &m.reparameterize(eps)))
                    };
                    Ok((at(h)? - at(-h)?) / (2.0 * h))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut lemma1: f64 = 0.0;
    let mut corollary1: f64 = 0.0;
    for k in 0..n_phi {
        let mut lhs1 = 0.0;
        let mut rhs1 = 0.0;
        let mut lhs_c = 0.0;
        let mut rhs_c = 0.0;
        for ((p, t), d) in probs.iter().zip(&eval.terms).zip(&total_dlogw) {
            let (fv, fz, _, _) = eval.test_terms(t, f);
            let pulled_f = pull_back(&eval.model, &t.eps, &fz);
            lhs1 += p * fv * d[k];
            rhs1 += p * ((1.0 - beta) * fv * t.path_grad[k] - pulled_f[k]);
            lhs_c += p * d[k];
            rhs_c += p * (1.0 - beta) * t.path_grad[k];
        }
        lemma1 = lemma1.max((lhs1 - rhs1).abs());
        corollary1 = corollary1.max((lhs_c - rhs_c).abs());
    }

    // Z_β = exp ψ(β) in closed form, differenced in φ
    let z_beta = |p: &ParamVector| -> Result<f64> { Ok(p.to_model(model)?.path(x.clone())?.psi(beta)?.exp()) };
    let mut lemma2: f64 = 0.0;
    for k in 0..n_phi {
        let v = base.phi[k];
        let h = FD_STEP * v.abs().max(1.0);
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus.phi[k] = v + h;
        minus.phi[k] = v - h;
        let lhs = (z_beta(&plus)? - z_beta(&minus)?) / (2.0 * h);
        let rhs: f64 = beta
            * (1.0 - beta)
            * eval
                .terms
                .iter()
                .zip(&eval.log_base)
                .map(|(t, b)| (b + beta * t.log_w).exp() * t.path_grad[k])
                .sum::<f64>();
        lemma2 = lemma2.max((lhs - rhs).abs());
    }
    Ok(LemmaResiduals {
        lemma1,
        corollary1,
        lemma2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    fn model_1d() -> (LinearGaussianModel, DVector<f64>) {
        let m = LinearGaussianModel::new(dmatrix![1.3], dvector![0.2], 0.8, dvector![0.1], dvector![0.7]).unwrap();
        (m, dvector![0.9])
    }

    #[test]
    fn params_round_trip() {
        let m = LinearGaussianModel::new(
            dmatrix![1.0, 2.0; 3.0, 4.0; 5.0, 6.0],
            dvector![0.1, 0.2, 0.3],
            0.5,
            dvector![-1.0, 1.0],
            dvector![0.3, 2.0],
        )
        .unwrap();
        let p = ParamVector::of(&m);
        assert_eq!(&p.theta[..6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(p.phi.len(), 4);
        let back = p.to_model(&m).unwrap();
        assert_abs_diff_eq!(back.obs_stddev, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(back.encoder_stddev[1], 2.0, epsilon = 1e-15);
        assert_eq!(back.decoder_weight, m.decoder_weight);
    }

    #[test]
    fn coefficients_vanish_at_endpoints() {
        assert_eq!(doubly_reparam_coefficients(0.0), (1.0, 0.0));
        assert_eq!(doubly_reparam_coefficients(1.0), (-1.0, 0.0));
        assert_eq!(doubly_reparam_coefficients(0.5).1, 0.25);
    }

    #[test]
    fn quadrature_estimators_match_finite_differences() {
        let (m, x) = model_1d();
        let atoms = Atoms::gauss_hermite(1, QUADRATURE_NODES);
        for beta in [0.0, 0.3, 0.5, 1.0] {
            let fd = finite_diff_grad(&m, &x, beta, &FdTarget::Eta).unwrap();
            let rf = reinforce_grad(&m, &x, beta, &atoms).unwrap();
            let dr = doubly_reparam_grad(&m, &x, beta, &atoms).unwrap();
            assert!(rf.max_abs_diff(&fd) < 1e-5, "reinforce beta {beta}: {rf:?} vs {fd:?}");
            assert!(dr.max_abs_diff(&fd) < 1e-5, "doubly beta {beta}: {dr:?} vs {fd:?}");
        }
    }

    #[test]
    fn generic_estimator_covers_every_test_function() {
        let (m, x) = model_1d();
        let atoms = Atoms::gauss_hermite(1, QUADRATURE_NODES);
        for f in [TestFunction::LogW, TestFunction::Coordinate(0), TestFunction::LogWSquared, TestFunction::Constant(2.0)] {
            for beta in [0.2, 0.7] {
                let fd = finite_diff_grad(&m, &x, beta, &FdTarget::Expectation(f)).unwrap();
                let g = generic_reparam_grad(&m, &x, beta, f, &atoms).unwrap();
                let diff = g.d_phi.iter().zip(&fd.d_phi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(diff < 1e-5, "{f} beta {beta}: {:?} vs {:?}", g.d_phi, fd.d_phi);
                let rf = EvaluatedAtoms::new(&m, &x, &atoms).unwrap().reinforce(beta, f).unwrap();
                assert!(rf.max_abs_diff(&fd) < 1e-5, "reinforce {f} beta {beta}");
            }
        }
        let c = generic_reparam_grad(&m, &x, 0.4, TestFunction::Constant(3.0), &atoms).unwrap();
        assert!(c.norm() < 1e-12);
    }

    #[test]
    fn posterior_mean_is_encoder_free() {
        let (m, x) = model_1d();
        let atoms = Atoms::gauss_hermite(1, QUADRATURE_NODES);
        let g = generic_reparam_grad(&m, &x, 1.0, TestFunction::Coordinate(0), &atoms).unwrap();
        let fd = finite_diff_grad(&m, &x, 1.0, &FdTarget::Expectation(TestFunction::Coordinate(0))).unwrap();
        for (a, b) in g.d_phi.iter().zip(&fd.d_phi) {
            assert!(a.abs() < 1e-8 && b.abs() < 1e-8);
        }
    }

    #[test]
    fn psi_at_zero_has_zero_gradient() {
        let (m, x) = model_1d();
        let fd = finite_diff_grad(&m, &x, 0.0, &FdTarget::Psi).unwrap();
        assert!(fd.norm() < 1e-9);
    }

    #[test]
    fn lemma_residuals_are_small() {
        let (m, x) = model_1d();
        for beta in [0.0, 0.5, 1.0] {
            let r = lemma_checks(&m, &x, beta, TestFunction::LogW).unwrap();
            assert!(r.max() < 1e-5, "beta {beta}: {r:?}");
        }
    }

    #[test]
    fn adapted_atoms_handle_a_wide_encoder() {
        let m = LinearGaussianModel::new(dmatrix![2.0; 1.0], dvector![0.0, 0.0], 0.5, dvector![0.0], dvector![1.0]).unwrap();
        let x = dvector![0.4, -0.2];
        for beta in [0.1, 0.5, 0.9] {
            let atoms = Atoms::adapted(&m, &x, beta, QUADRATURE_NODES).unwrap();
            let fd = finite_diff_grad(&m, &x, beta, &FdTarget::Eta).unwrap();
            let dr = doubly_reparam_grad(&m, &x, beta, &atoms).unwrap();
            assert!(dr.max_abs_diff(&fd) < 1e-5, "beta {beta}");
            assert!(lemma_checks(&m, &x, beta, TestFunction::LogW).unwrap().max() < 1e-5);
        }
        let plain = Atoms::adapted(&m, &x, 0.0, 8).unwrap();
        let total: f64 = plain.log_base.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (m, x) = model_1d();
        let one = Atoms::from_eps(vec![dvector![0.3]]);
        assert!(matches!(
            reinforce_grad(&m, &x, 0.5, &one),
            Err(TvoError::TooFewSamples { needed: 2, got: 1 })
        ));
        let atoms = Atoms::gauss_hermite(1, 8);
        assert!(reinforce_grad(&m, &x, 1.5, &atoms).is_err());
        assert!(generic_reparam_grad(&m, &x, 0.5, TestFunction::Coordinate(3), &atoms).is_err());
        assert!("cubic".parse::<TestFunction>().is_err());
        assert_eq!("z1".parse::<TestFunction>().unwrap(), TestFunction::Coordinate(1));
        assert_eq!("log_w".parse::<TestFunction>().unwrap(), TestFunction::LogW);
    }
}
