//! Desk-scale training of a linear-Gaussian model on synthetic data.
//!
//! The decoder `θ` is shared; every datapoint has its own encoder `φ_i`.
//! Each epoch draws `S` reparameterized samples per datapoint, refreshes the
//! schedule from the resulting log-weight grid, logs exact path quantities at
//! the current parameters, then takes one joint SGD ascent step.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tvo_core::bounds::{tvo_lower, tvo_upper};
use tvo_core::gradients::{Atoms, EvaluatedAtoms, GradEstimate, ParamVector};
use tvo_core::schedules::{linear_schedule, SnisEta};
use tvo_core::snis::{iwae_bound, snis_eta_mean};
use tvo_core::{LinearGaussianModel, LogWeightGrid, PathFamily, Schedule};

use super::config::{ExperimentConfig, Init, Objective, TRAIN_DATAPOINTS};
use super::error::{HarnessError, Result};
use super::{build_schedule, ensure_output_dir, fmt_float, load_model};

/// Slack on the logged sandwich, relative to `1 + |log p(x)|`.
const SANDWICH_SLACK: f64 = 1e-9;

/// Exact quantities at the start of one epoch, averaged over the dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Sample estimate of the training objective.
    pub objective: f64,
    pub tvo_lower: f64,
    pub tvo_upper: f64,
    pub elbo: f64,
    pub eubo: f64,
    pub log_px: f64,
    /// `KL[q || p(z|x)] = log p(x) - ELBO`.
    pub kl_q_posterior: f64,
    pub grad_norm_theta: f64,
    /// Root mean square of the per-datapoint encoder gradient norms.
    pub grad_norm_phi: f64,
    pub schedule: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    rows: Vec<EpochRow>,
    /// Exact mean `KL[q || p(z|x)]` after the last update.
    pub final_kl: f64,
}

impl TrainLog {
    /// Appends a row, rejecting it if the exact sandwich fails.
    pub fn push(&mut self, row: EpochRow) -> Result<()> {
        let slack = SANDWICH_SLACK * (1.0 + row.log_px.abs());
        if row.tvo_lower > row.log_px + slack || row.log_px > row.tvo_upper + slack {
            return Err(HarnessError::Sandwich {
                epoch: row.epoch,
                tvo_lower: row.tvo_lower,
                log_px: row.log_px,
                tvo_upper: row.tvo_upper,
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[EpochRow] {
        &self.rows
    }

    pub fn initial_kl(&self) -> Option<f64> {
        self.rows.first().map(|r| r.kl_q_posterior)
    }

    /// Mean schedule median over each quarter of the epochs.
    pub fn median_beta_by_quartile(&self) -> Vec<f64> {
        let n = self.rows.len();
        (0..4)
            .filter_map(|q| {
                let chunk = &self.rows[q * n / 4..(q + 1) * n / 4];
                if chunk.is_empty() {
                    return None;
                }
                let sum: f64 = chunk.iter().map(|r| median(&r.schedule)).sum();
                Some(sum / chunk.len() as f64)
            })
            .collect()
    }
}

fn median(betas: &[f64]) -> f64 {
    let n = betas.len();
    if n % 2 == 1 {
        betas[n / 2]
    } else {
        0.5 * (betas[n / 2 - 1] + betas[n / 2])
    }
}

fn finite_or(epoch: usize, what: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(HarnessError::Divergence { epoch, what })
    }
}

struct Exact {
    tvo_lower: f64,
    tvo_upper: f64,
    elbo: f64,
    eubo: f64,
    log_px: f64,
}

fn exact_metrics(models: &[LinearGaussianModel], xs: &[DVector<f64>], schedule: &Schedule) -> Result<Exact> {
    let mut acc = [0.0; 5];
    for (m, x) in models.iter().zip(xs) {
        let path = m.path(x.clone())?;
        let etas = schedule.betas().iter().map(|&b| path.eta(b)).collect::<tvo_core::Result<Vec<_>>>()?;
        acc[0] += tvo_lower(&etas, schedule)?;
        acc[1] += tvo_upper(&etas, schedule)?;
        acc[2] += etas[0];
        acc[3] += etas[etas.len() - 1];
        acc[4] += path.log_px();
    }
    let n = models.len() as f64;
    Ok(Exact {
        tvo_lower: acc[0] / n,
        tvo_upper: acc[1] / n,
        elbo: acc[2] / n,
        eubo: acc[3] / n,
        log_px: acc[4] / n,
    })
}

fn mean_kl(models: &[LinearGaussianModel], xs: &[DVector<f64>]) -> Result<f64> {
    let mut acc = 0.0;
    for (m, x) in models.iter().zip(xs) {
        let path = m.path(x.clone())?;
        acc += path.log_px() - path.eta(0.0)?;
    }
    Ok(acc / models.len() as f64)
}

/// Synthetic dataset drawn from the ground-truth model with the config seed.
pub fn synthetic_data(truth: &LinearGaussianModel, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..TRAIN_DATAPOINTS).map(|_| truth.sample_x(&mut rng)).collect()
}

pub fn train(config: &ExperimentConfig) -> Result<TrainLog> {
    config.validate()?;
    let spec = load_model(config, "train")?;
    let (truth, _) = spec.linear_gaussian()?.ok_or(HarnessError::WrongModelKind {
        command: "train",
        expected: "linear_gaussian",
        actual: "discrete",
    })?;
    let xs = synthetic_data(&truth, config.seed);
    let dz = truth.latent_dim();

    let mut theta = ParamVector::of(&truth).theta;
    let mut phis: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| match config.init {
            Init::Spec => Ok(ParamVector::of(&truth).phi),
            Init::Posterior => Ok(ParamVector::of(&truth.with_posterior_encoder(x)?).phi),
        })
        .collect::<tvo_core::Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let one_interval = linear_schedule(1)?;
    let mut schedule = linear_schedule(config.k)?;
    let mut log = TrainLog::default();
    let n = xs.len() as f64;

    let build = |theta: &[f64], phis: &[Vec<f64>]| -> Result<Vec<LinearGaussianModel>> {
        phis.iter()
            .map(|phi| {
                let p = ParamVector {
                    theta: theta.to_vec(),
                    phi: phi.clone(),
                };
                Ok(p.to_model(&truth)?)
            })
            .collect()
    };

    for epoch in 1..=config.epochs {
        let models = build(&theta, &phis).map_err(|e| match e {
            HarnessError::Core(tvo_core::TvoError::InvalidModel(_)) => HarnessError::Divergence {
                epoch,
                what: "parameters",
            },
            e => e,
        })?;
        let evals = models
            .iter()
            .zip(&xs)
            .map(|(m, x)| EvaluatedAtoms::new(m, x, &Atoms::sample(dz, config.s, &mut rng)))
            .collect::<tvo_core::Result<Vec<_>>>()?;
        let grid = LogWeightGrid::from_columns(evals.iter().map(EvaluatedAtoms::log_weights).collect())
            .map_err(|_| HarnessError::Divergence { epoch, what: "log weights" })?;
        if (epoch - 1) % config.refresh_every == 0 {
            schedule = build_schedule(config.schedule_strategy, &SnisEta(&grid), config.k, config)?;
        }

        let objective = match config.objective {
            Objective::Tvo => {
                let etas = schedule
                    .betas()
                    .iter()
                    .map(|&b| snis_eta_mean(&grid, b))
                    .collect::<tvo_core::Result<Vec<_>>>()?;
                tvo_lower(&etas, &schedule)?
            }
            Objective::Elbo => snis_eta_mean(&grid, 0.0)?,
            Objective::Iwae => iwae_bound(&grid).iter().sum::<f64>() / n,
        };
        finite_or(epoch, "objective", objective)?;

        let grads = evals
            .iter()
            .map(|e| match config.objective {
                Objective::Tvo => e.tvo_lower_gradient(&schedule),
                Objective::Elbo => e.tvo_lower_gradient(&one_interval),
                Objective::Iwae => e.iwae_gradient(),
            })
            .collect::<tvo_core::Result<Vec<GradEstimate>>>()?;
        let mut d_theta = vec![0.0; theta.len()];
        for g in &grads {
            for (acc, v) in d_theta.iter_mut().zip(&g.d_theta) {
                *acc += v / n;
            }
        }
        let grad_norm_theta = finite_or(epoch, "gradient", d_theta.iter().map(|v| v * v).sum::<f64>().sqrt())?;
        let phi_sq: f64 = grads.iter().flat_map(|g| g.d_phi.iter()).map(|v| v * v).sum();
        let grad_norm_phi = finite_or(epoch, "gradient", (phi_sq / n).sqrt())?;

        let exact = exact_metrics(&models, &xs, &schedule)?;
        log.push(EpochRow {
            epoch,
            objective,
            tvo_lower: exact.tvo_lower,
            tvo_upper: exact.tvo_upper,
            elbo: exact.elbo,
            eubo: exact.eubo,
            log_px: exact.log_px,
            kl_q_posterior: exact.log_px - exact.elbo,
            grad_norm_theta,
            grad_norm_phi,
            schedule: schedule.betas().to_vec(),
        })?;

        for (t, d) in theta.iter_mut().zip(&d_theta) {
            *t += config.learning_rate * d;
        }
        for (phi, g) in phis.iter_mut().zip(&grads) {
            for (p, d) in phi.iter_mut().zip(&g.d_phi) {
                *p += config.learning_rate * d;
            }
        }
    }
    let models = build(&theta, &phis).map_err(|_| HarnessError::Divergence {
        epoch: config.epochs,
        what: "parameters",
    })?;
    log.final_kl = finite_or(config.epochs, "objective", mean_kl(&models, &xs)?)?;
    Ok(log)
}

pub fn write_trainlog(config: &ExperimentConfig, log: &TrainLog) -> Result<std::path::PathBuf> {
    ensure_output_dir(config)?;
    let path = config.output_path("trainlog.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "epoch",
        "objective",
        "tvo_lower",
        "tvo_upper",
        "elbo",
        "eubo",
        "log_px",
        "kl_q_posterior",
        "grad_norm_theta",
        "grad_norm_phi",
        "schedule",
    ])?;
    for r in log.rows() {
        let schedule: Vec<String> = r.schedule.iter().map(|b| fmt_float(*b)).collect();
        w.write_record([
            r.epoch.to_string(),
            fmt_float(r.objective),
            fmt_float(r.tvo_lower),
            fmt_float(r.tvo_upper),
            fmt_float(r.elbo),
            fmt_float(r.eubo),
            fmt_float(r.log_px),
            fmt_float(r.kl_q_posterior),
            fmt_float(r.grad_norm_theta),
            fmt_float(r.grad_norm_phi),
            schedule.join(" "),
        ])?;
    }
    w.flush()?;
    Ok(path)
}
