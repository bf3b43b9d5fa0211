use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{check_beta, PathFamily, PathMoments};
use crate::error::{Result, TvoError};

/// Largest condition number accepted for the path precision matrix.
pub const DEGENERATE_CONDITION: f64 = 1e12;

/// Linear-Gaussian latent variable model with a mean-field Gaussian encoder.
///
/// `p(z) = N(0, I)`, `p(x|z) = N(A z + b, σ² I)`, `q(z|x) = N(m, diag(t²))`,
/// with `z = m + t ⊙ ε` for `ε ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearGaussianModel {
    pub decoder_weight: DMatrix<f64>,
    pub decoder_bias: DVector<f64>,
    pub obs_stddev: f64,
    pub encoder_mean: DVector<f64>,
    pub encoder_stddev: DVector<f64>,
}

impl LinearGaussianModel {
    pub fn new(
        decoder_weight: DMatrix<f64>,
        decoder_bias: DVector<f64>,
        obs_stddev: f64,
        encoder_mean: DVector<f64>,
        encoder_stddev: DVector<f64>,
    ) -> Result<Self> {
        let (dx, dz) = decoder_weight.shape();
        if dz == 0 || dx == 0 {
            return Err(TvoError::InvalidModel("empty decoder weight".into()));
        }
        if decoder_bias.len() != dx {
            return Err(TvoError::InvalidModel(format!(
                "decoder bias has length {}, expected {dx}",
                decoder_bias.len()
            )));
        }
        if encoder_mean.len() != dz || encoder_stddev.len() != dz {
            return Err(TvoError::InvalidModel(format!(
                "encoder parameters must have length {dz}"
            )));
        }
        if !(obs_stddev > 0.0 && obs_stddev.is_finite()) {
            return Err(TvoError::InvalidModel("obs_stddev must be positive".into()));
        }
        if encoder_stddev.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return Err(TvoError::InvalidModel("encoder stddevs must be positive".into()));
        }
        let all_finite = decoder_weight
            .iter()
            .chain(decoder_bias.iter())
            .chain(encoder_mean.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(TvoError::InvalidModel("non-finite parameter".into()));
        }
        Ok(Self {
            decoder_weight,
            decoder_bias,
            obs_stddev,
            encoder_mean,
            encoder_stddev,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.decoder_weight.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.decoder_weight.nrows()
    }

    /// Copy of the model with a different encoder.
    pub fn with_encoder(&self, mean: DVector<f64>, stddev: DVector<f64>) -> Result<Self> {
        Self::new(
            self.decoder_weight.clone(),
            self.decoder_bias.clone(),
            self.obs_stddev,
            mean,
            stddev,
        )
    }

    fn check_x(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.obs_dim() {
            return Err(TvoError::LengthMismatch {
                expected: self.obs_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Binds a datapoint, producing the path family over `z`.
    pub fn path(&self, x: DVector<f64>) -> Result<GaussianPath> {
        self.check_x(&x)?;
        Ok(GaussianPath::new(self.clone(), x))
    }

    /// `log p(x, z)`.
    pub fn log_joint(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
        let dz = self.latent_dim() as f64;
        let dx = self.obs_dim() as f64;
        let s2 = self.obs_stddev * self.obs_stddev;
        let r = x - &self.decoder_weight * z - &self.decoder_bias;
        -0.5 * z.norm_squared() - 0.5 * dz * (2.0 * PI).ln() - 0.5 * r.norm_squared() / s2
            - 0.5 * dx * (2.0 * PI * s2).ln()
    }

    /// `log q(z|x)`.
    pub fn log_q(&self, z: &DVector<f64>) -> f64 {
        let dz = self.latent_dim() as f64;
        let mut acc = -0.5 * dz * (2.0 * PI).ln();
        for j in 0..self.latent_dim() {
            let t = self.encoder_stddev[j];
            let u = (z[j] - self.encoder_mean[j]) / t;
            acc -= 0.5 * u * u + t.ln();
        }
        acc
    }

    /// `log w(z) = log p(x, z) - log q(z|x)`.
    pub fn log_w(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
        self.log_joint(x, z) - self.log_q(z)
    }

    /// `z = m + t ⊙ ε`.
    pub fn reparameterize(&self, eps: &DVector<f64>) -> DVector<f64> {
        &self.encoder_mean + self.encoder_stddev.component_mul(eps)
    }

    /// `∂ log p(x, z) / ∂z`.
    pub fn grad_z_log_joint(&self, x: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let s2 = self.obs_stddev * self.obs_stddev;
        let r = x - &self.decoder_weight * z - &self.decoder_bias;
        self.decoder_weight.transpose() * r / s2 - z
    }

    /// `∂ log q(z|x) / ∂z`.
    pub fn grad_z_log_q(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.latent_dim(), |j, _| {
            let t = self.encoder_stddev[j];
            -(z[j] - self.encoder_mean[j]) / (t * t)
        })
    }

    /// `∂ log w / ∂z` holding the encoder parameters fixed.
    pub fn grad_z_log_w(&self, x: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        self.grad_z_log_joint(x, z) - self.grad_z_log_q(z)
    }

    /// Exact posterior `p(z|x)` as `(mean, covariance)`.
    pub fn posterior(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let s2 = self.obs_stddev * self.obs_stddev;
        let a = &self.decoder_weight;
        let dz = self.latent_dim();
        let precision = DMatrix::identity(dz, dz) + a.transpose() * a / s2;
        let cov = precision
            .cholesky()
            .expect("posterior precision is positive definite")
            .inverse();
        let mean = &cov * (a.transpose() * (x - &self.decoder_bias) / s2);
        (mean, cov)
    }

    /// Closed-form evidence: `x ~ N(b, A Aᵀ + σ² I)`.
    pub fn log_marginal(&self, x: &DVector<f64>) -> f64 {
        let dx = self.obs_dim();
        let a = &self.decoder_weight;
        let cov = a * a.transpose()
            + DMatrix::identity(dx, dx) * (self.obs_stddev * self.obs_stddev);
        gaussian_log_density(x, &self.decoder_bias, &cov)
    }

    /// Encoder set to the posterior mean and marginal posterior stddevs.
    ///
    /// This is the exact posterior whenever the posterior covariance is
    /// diagonal (always when `d_z = 1`).
    pub fn with_posterior_encoder(&self, x: &DVector<f64>) -> Result<Self> {
        let (mean, cov) = self.posterior(x);
        let sd = DVector::from_fn(self.latent_dim(), |j, _| cov[(j, j)].sqrt());
        self.with_encoder(mean, sd)
    }

    /// Draws `x` from the generative model.
    pub fn sample_x<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.latent_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = DVector::from_fn(self.obs_dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.decoder_weight * z + &self.decoder_bias + noise * self.obs_stddev
    }
}

fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x.len() as f64;
    let chol = cov.clone().cholesky().expect("covariance is positive definite");
    let diff = x - mean;
    let sol = chol.solve(&diff);
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (d * (2.0 * PI).ln() + log_det + diff.dot(&sol))
}

/// Quadratic `-½ zᵀ P z + hᵀ z + c` in the latent variable.
#[derive(Debug, Clone, PartialEq)]
struct Quadratic {
    precision: DMatrix<f64>,
    linear: DVector<f64>,
    constant: f64,
}

impl Quadratic {
    fn blend(&self, other: &Quadratic, beta: f64) -> Quadratic {
        Quadratic {
            precision: &self.precision * (1.0 - beta) + &other.precision * beta,
            linear: &self.linear * (1.0 - beta) + &other.linear * beta,
            constant: (1.0 - beta) * self.constant + beta * other.constant,
        }
    }

    fn minus(&self, other: &Quadratic) -> Quadratic {
        Quadratic {
            precision: &self.precision - &other.precision,
            linear: &self.linear - &other.linear,
            constant: self.constant - other.constant,
        }
    }

    fn eval(&self, z: &DVector<f64>) -> f64 {
        -0.5 * (z.transpose() * &self.precision * z)[(0, 0)] + self.linear.dot(z) + self.constant
    }
}

/// Path family of a [`LinearGaussianModel`] at one datapoint.
///
/// `log q + β log w` is quadratic in `z`, so `π_β` is Gaussian with precision
/// `Λ_β = (1-β) P_q + β P_p` and every path quantity has a closed form.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPath {
    model: LinearGaussianModel,
    x: DVector<f64>,
    log_q: Quadratic,
    log_joint: Quadratic,
    log_w: Quadratic,
}

/// Moments of the Gaussian `π_β`.
#[derive(Debug, Clone)]
pub struct PathGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    pub log_det_precision: f64,
}

impl GaussianPath {
    fn new(model: LinearGaussianModel, x: DVector<f64>) -> Self {
        let dz = model.latent_dim();
        let dx = model.obs_dim() as f64;
        let ln2pi = (2.0 * PI).ln();
        let s2 = model.obs_stddev * model.obs_stddev;
        let a = &model.decoder_weight;
        let resid = &x - &model.decoder_bias;
        let log_joint = Quadratic {
            precision: DMatrix::identity(dz, dz) + a.transpose() * a / s2,
            linear: a.transpose() * &resid / s2,
            constant: -0.5 * resid.norm_squared() / s2
                - 0.5 * dx * (2.0 * PI * s2).ln()
                - 0.5 * dz as f64 * ln2pi,
        };
        let inv_t2 = model.encoder_stddev.map(|t| 1.0 / (t * t));
        let log_q = Quadratic {
            precision: DMatrix::from_diagonal(&inv_t2),
            linear: model.encoder_mean.component_mul(&inv_t2),
            constant: -0.5 * model.encoder_mean.component_mul(&model.encoder_mean).dot(&inv_t2)
                - model.encoder_stddev.iter().map(|t| t.ln()).sum::<f64>()
                - 0.5 * dz as f64 * ln2pi,
        };
        let log_w = log_joint.minus(&log_q);
        Self {
            model,
            x,
            log_q,
            log_joint,
            log_w,
        }
    }

    pub fn model(&self) -> &LinearGaussianModel {
        &self.model
    }

    pub fn x(&self) -> &DVector<f64> {
        &self.x
    }

    /// `log w(z)` through the precomputed quadratic form.
    pub fn log_w_quadratic(&self, z: &DVector<f64>) -> f64 {
        self.log_w.eval(z)
    }

    /// Gaussian form of `π_β`; fails when `Λ_β` is not safely positive definite.
    pub fn path_gaussian(&self, beta: f64) -> Result<PathGaussian> {
        check_beta(beta)?;
        let nat = self.log_q.blend(&self.log_joint, beta);
        let eig = nat.precision.clone().symmetric_eigen();
        let min = eig.eigenvalues.min();
        let max = eig.eigenvalues.max();
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if !(condition <= DEGENERATE_CONDITION) {
            return Err(TvoError::DegenerateCovariance { beta, condition });
        }
        let chol = nat
            .precision
            .clone()
            .cholesky()
            .ok_or(TvoError::DegenerateCovariance { beta, condition })?;
        let cov = chol.inverse();
        let mean = &cov * &nat.linear;
        let log_det_precision = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(PathGaussian {
            mean,
            cov,
            precision: nat.precision,
            log_det_precision,
        })
    }
}

impl PathFamily for GaussianPath {
    fn moments(&self, beta: f64) -> Result<PathMoments> {
        let g = self.path_gaussian(beta)?;
        let dz = self.model.latent_dim() as f64;
        let nat = self.log_q.blend(&self.log_joint, beta);
        let psi = nat.constant + 0.5 * nat.linear.dot(&g.mean) + 0.5 * dz * (2.0 * PI).ln()
            - 0.5 * g.log_det_precision;

        let pw = &self.log_w.precision;
        let pw_cov = pw * &g.cov;
        let eta = -0.5 * (pw_cov.trace() + g.mean.dot(&(pw * &g.mean)))
            + self.log_w.linear.dot(&g.mean)
            + self.log_w.constant;
        // log w = const + gᵀu - ½ uᵀ P_w u with u ~ N(0, Σ)
        let grad = &self.log_w.linear - pw * &g.mean;
        let var = grad.dot(&(&g.cov * &grad)) + 0.5 * (&pw_cov * &pw_cov).trace();
        Ok(PathMoments {
            psi,
            eta,
            var: var.max(0.0),
        })
    }

    fn log_px(&self) -> f64 {
        self.model.log_marginal(&self.x)
    }

    fn kl(&self, beta_a: f64, beta_b: f64) -> Result<f64> {
        let a = self.path_gaussian(beta_a)?;
        let b = self.path_gaussian(beta_b)?;
        let d = a.mean.len() as f64;
        let diff = &b.mean - &a.mean;
        let kl = 0.5
            * ((&b.precision * &a.cov).trace() + diff.dot(&(&b.precision * &diff)) - d
                + a.log_det_precision
                - b.log_det_precision);
        Ok(kl.max(0.0))
    }

    fn renyi_bound_direct(&self, alpha: f64) -> Result<f64> {
        check_beta(alpha)?;
        let q_mean = &self.model.encoder_mean;
        let q_cov = DMatrix::from_diagonal(&self.model.encoder_stddev.map(|t| t * t));
        let (p_mean, p_cov) = self.model.posterior(&self.x);
        let diff = q_mean - &p_mean;
        let log_det = |m: &DMatrix<f64>| -> Result<f64> {
            let chol = m.clone().cholesky().ok_or(TvoError::DegenerateCovariance {
                beta: 1.0 - alpha,
                condition: f64::INFINITY,
            })?;
            Ok(2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
        };
        let divergence = if alpha == 1.0 {
            let p_prec = p_cov
                .clone()
                .cholesky()
                .expect("posterior covariance is positive definite")
                .inverse();
            0.5 * ((&p_prec * &q_cov).trace() + diff.dot(&(&p_prec * &diff))
                - q_mean.len() as f64
                + log_det(&p_cov)?
                - log_det(&q_cov)?)
        } else {
            let mixed = &p_cov * alpha + &q_cov * (1.0 - alpha);
            let mixed_inv = mixed
                .clone()
                .cholesky()
                .ok_or(TvoError::DegenerateCovariance {
                    beta: 1.0 - alpha,
                    condition: f64::INFINITY,
                })?
                .inverse();
            0.5 * alpha * diff.dot(&(&mixed_inv * &diff))
                - (log_det(&mixed)? - (1.0 - alpha) * log_det(&q_cov)? - alpha * log_det(&p_cov)?)
                    / (2.0 * (alpha - 1.0))
        };
        Ok(self.log_px() - divergence)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};

    fn model() -> LinearGaussianModel {
        LinearGaussianModel::new(
            dmatrix![1.2, -0.3; 0.4, 0.8; -0.5, 0.2],
            dvector![0.1, -0.2, 0.3],
            0.7,
            dvector![0.2, -0.1],
            dvector![0.8, 1.1],
        )
        .unwrap()
    }

    #[test]
    fn quadratic_forms_match_direct_densities() {
        let m = model();
        let x = dvector![0.5, 0.1, -0.4];
        let path = m.path(x.clone()).unwrap();
        for z in [dvector![0.0, 0.0], dvector![1.3, -0.7], dvector![-2.0, 0.4]] {
            assert_abs_diff_eq!(path.log_w_quadratic(&z), m.log_w(&x, &z), epsilon = 1e-12);
        }
    }

    #[test]
    fn log_w_is_exactly_quadratic_along_lines() {
        // three-point quadratic fit along a line predicts a fourth point exactly
        let m = model();
        let x = dvector![0.5, 0.1, -0.4];
        let dir = dvector![0.3, -1.0];
        let f = |s: f64| m.log_w(&x, &(dvector![0.1, 0.2] + &dir * s));
        let (f0, f1, f2) = (f(0.0), f(1.0), f(2.0));
        let predicted = f0 - 3.0 * f1 + 3.0 * f2; // Lagrange extrapolation to s = 3
        assert_abs_diff_eq!(predicted, f(3.0), epsilon = 1e-10);
    }

    #[test]
    fn endpoints_anchor_psi() {
        let m = model();
        let path = m.path(dvector![0.5, 0.1, -0.4]).unwrap();
        assert_abs_diff_eq!(path.psi(0.0).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(path.psi(1.0).unwrap(), path.log_px(), epsilon = 1e-12);
    }

    #[test]
    fn exact_posterior_encoder_gives_flat_integrand() {
        let m = LinearGaussianModel::new(
            dmatrix![1.5; -0.5],
            dvector![0.0, 0.2],
            0.6,
            dvector![0.0],
            dvector![1.0],
        )
        .unwrap();
        let x = dvector![0.9, -0.1];
        let path = m.with_posterior_encoder(&x).unwrap().path(x.clone()).unwrap();
        for beta in [0.0, 0.4, 1.0] {
            let mo = path.moments(beta).unwrap();
            assert_abs_diff_eq!(mo.eta, path.log_px(), epsilon = 1e-10);
            assert_abs_diff_eq!(mo.var, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn rejects_inconsistent_dimensions() {
        assert!(LinearGaussianModel::new(
            dmatrix![1.0, 0.0],
            dvector![0.0, 0.0],
            1.0,
            dvector![0.0, 0.0],
            dvector![1.0, 1.0]
        )
        .is_err());
        assert!(LinearGaussianModel::new(
            dmatrix![1.0],
            dvector![0.0],
            -1.0,
            dvector![0.0],
            dvector![1.0]
        )
        .is_err());
        assert!(model().path(dvector![1.0]).is_err());
    }

    #[test]
    fn extrapolated_beta_with_flipped_curvature_is_degenerate() {
        // q much narrower than the posterior: Λ_β = (1-β)P_q + βP_p turns
        // indefinite for β well above one.
        let m = LinearGaussianModel::new(dmatrix![0.1], dvector![0.0], 1.0, dvector![0.0], dvector![0.1])
            .unwrap();
        let path = m.path(dvector![0.3]).unwrap();
        assert!(path.moments(0.5).is_ok());
        assert!(matches!(
            path.moments(1.02),
            Err(TvoError::DegenerateCovariance { .. })
        ));
    }
}
