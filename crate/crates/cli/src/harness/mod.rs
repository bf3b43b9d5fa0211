//! Experiment drivers behind the `tvo` binary.
//!
//! Each subcommand reads an [`ExperimentConfig`] and writes one artifact under
//! its output directory: `report.json`, `study.csv`, `trainlog.csv` or
//! `integrand.csv`.

mod config;
mod error;
mod integrand;
mod study;
mod train;
mod verify;

pub use config::{ExperimentConfig, Init, Objective, Strategy, DEFAULT_BETA1, DEFAULT_J, TRAIN_DATAPOINTS};
pub use error::{HarnessError, Result};
pub use integrand::{emit_integrand, write_integrand, IntegrandRow, INTEGRAND_ROWS};
pub use study::{run_schedule_study, write_study, StudyRow, STUDY_KS};
pub use train::{train, write_trainlog, EpochRow, TrainLog};
pub use verify::{run_verify, run_verify_with, write_report, CheckResult, VerifyOptions, VerifyReport};

use std::path::Path;

use tvo_core::schedules::{
    coarse_grained_schedule, linear_schedule, log_uniform_schedule, moments_schedule, EtaEvaluator,
    MomentsOptions,
};
use tvo_core::{ModelSpec, Schedule};

/// Float formatting for every CSV column: 17 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn load_model(config: &ExperimentConfig, command: &'static str) -> Result<ModelSpec> {
    let path = config.model_spec.as_ref().ok_or(HarnessError::MissingModel(command))?;
    read_model(path)
}

pub(crate) fn read_model(path: &Path) -> Result<ModelSpec> {
    ModelSpec::from_path(path).map_err(|source| HarnessError::UnreadableModel {
        path: path.display().to_string(),
        source,
    })
}

/// Builds a `K`-interval schedule with the given strategy. Coarse-grained
/// spacing uses `min(J, K)` knot intervals.
pub fn build_schedule<E: EtaEvaluator + ?Sized>(
    strategy: Strategy,
    eval: &E,
    k: usize,
    config: &ExperimentConfig,
) -> Result<Schedule> {
    let s = match strategy {
        Strategy::Linear => linear_schedule(k)?,
        Strategy::LogUniform if k == 1 => linear_schedule(1)?,
        Strategy::LogUniform => log_uniform_schedule(k, config.beta1_or_default())?,
        Strategy::Moments => moments_schedule(eval, k, MomentsOptions::default())?.schedule,
        Strategy::CoarseGrained => coarse_grained_schedule(eval, k, config.j_or_default().min(k))?,
    };
    Ok(s)
}

pub(crate) fn ensure_output_dir(config: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&config.output_dir)?;
    Ok(())
}
