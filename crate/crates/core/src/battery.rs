//! Seeded generators for random test models and schedules.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::models::{DiscreteLatentModel, LinearGaussianModel};
use crate::schedules::Schedule;

pub const MAX_STATES: usize = 16;
pub const MAX_INTERVALS: usize = 16;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random discrete model with `2..=MAX_STATES` states. Log masses of both
/// `q` and the joint are spread over several nats.
pub fn random_discrete<R: Rng + ?Sized>(rng: &mut R) -> Result<DiscreteLatentModel> {
    let m = rng.random_range(2..=MAX_STATES);
    let q: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..1.0f64).exp()).collect();
    let total: f64 = q.iter().sum();
    let q: Vec<f64> = q.iter().map(|v| v / total).collect();
    let scale = rng.random_range(0.05..1.0);
    let joint: Vec<f64> = (0..m).map(|_| scale * rng.random_range(-3.0..1.0f64).exp()).collect();
    DiscreteLatentModel::new(&q, &joint)
}

/// Random strictly increasing schedule with `1..=MAX_INTERVALS` intervals.
pub fn random_schedule<R: Rng + ?Sized>(rng: &mut R) -> Result<Schedule> {
    let k = rng.random_range(1..=MAX_INTERVALS);
    let mut inner: Vec<f64> = (1..k).map(|_| rng.random_range(0.001..0.999)).collect();
    inner.sort_by(f64::total_cmp);
    inner.dedup();
    let mut betas = Vec::with_capacity(inner.len() + 2);
    betas.push(0.0);
    betas.extend(inner);
    betas.push(1.0);
    Schedule::new(betas)
}

/// Random 1-d latent linear-Gaussian model with its datapoint.
///
/// The encoder sits within one posterior stddev of the posterior mean and its
/// width is 0.6 to 1.6 posterior stddevs.
pub fn random_gaussian_1d<R: Rng + ?Sized>(rng: &mut R) -> Result<(LinearGaussianModel, DVector<f64>)> {
    let dx = rng.random_range(1..=2);
    let a = DMatrix::from_fn(dx, 1, |_, _| rng.random_range(-2.0..2.0));
    let b = DVector::from_fn(dx, |_, _| rng.random_range(-1.0..1.0));
    let sigma = rng.random_range(0.5..1.5);
    let x = DVector::from_fn(dx, |_, _| rng.random_range(-2.0..2.0));
    let base = LinearGaussianModel::new(a, b, sigma, DVector::zeros(1), DVector::from_element(1, 1.0))?;
    let (mean, cov) = base.posterior(&x);
    let sd = cov[(0, 0)].sqrt();
    let m = mean[0] + sd * rng.random_range(-1.0..1.0);
    let t = sd * rng.random_range(0.6..1.6);
    let model = base.with_encoder(DVector::from_element(1, m), DVector::from_element(1, t))?;
    Ok((model, x))
}

/// `n` discrete models from one seed.
pub fn discrete_battery(seed: u64, n: usize) -> Result<Vec<DiscreteLatentModel>> {
    let mut r = rng(seed);
    (0..n).map(|_| random_discrete(&mut r)).collect()
}

pub fn schedule_battery(seed: u64, n: usize) -> Result<Vec<Schedule>> {
    let mut r = rng(seed);
    (0..n).map(|_| random_schedule(&mut r)).collect()
}

pub fn gaussian_battery(seed: u64, n: usize) -> Result<Vec<(LinearGaussianModel, DVector<f64>)>> {
    let mut r = rng(seed);
    (0..n).map(|_| random_gaussian_1d(&mut r)).collect()
}
