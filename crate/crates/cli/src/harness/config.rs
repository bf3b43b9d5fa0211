use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use super::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Tvo,
    Iwae,
    Elbo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Linear,
    LogUniform,
    Moments,
    CoarseGrained,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Linear,
        Strategy::LogUniform,
        Strategy::Moments,
        Strategy::CoarseGrained,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Linear => "linear",
            Strategy::LogUniform => "log_uniform",
            Strategy::Moments => "moments",
            Strategy::CoarseGrained => "coarse_grained",
        }
    }
}

/// Starting encoder for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Encoder parameters from the model file, shared by every datapoint.
    Spec,
    /// Exact per-datapoint posterior.
    Posterior,
}

/// Settings shared by every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model_spec: Option<PathBuf>,
    pub objective: Objective,
    pub schedule_strategy: Strategy,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "S")]
    pub s: usize,
    pub beta1: Option<f64>,
    #[serde(rename = "J")]
    pub j: Option<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub refresh_every: usize,
    pub output_dir: PathBuf,
    pub init: Init,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model_spec: None,
            objective: Objective::Tvo,
            schedule_strategy: Strategy::Moments,
            k: 2,
            s: 100,
            beta1: None,
            j: None,
            epochs: 500,
            learning_rate: 1e-2,
            seed: 0,
            refresh_every: 1,
            output_dir: PathBuf::from("."),
            init: Init::Spec,
        }
    }
}

/// Knot count for coarse-grained spacing when the config leaves `J` unset.
pub const DEFAULT_J: usize = 4;
/// First nonzero β for log-uniform spacing when the config leaves it unset.
pub const DEFAULT_BETA1: f64 = 0.025;
/// Datapoints in the synthetic training set.
pub const TRAIN_DATAPOINTS: usize = 256;

impl ExperimentConfig {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let cfg: Self = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::InvalidConfig(msg));
        if self.k < 1 {
            return bad("K must be at least 1".into());
        }
        if self.s < 1 {
            return bad("S must be at least 1".into());
        }
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.refresh_every < 1 {
            return bad("refresh_every must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        match (self.schedule_strategy, self.beta1) {
            (Strategy::LogUniform, None) => return bad("beta1 is required for log_uniform spacing".into()),
            (Strategy::LogUniform, Some(b)) if !(b > 0.0 && b < 1.0) => {
                return bad(format!("beta1 must lie in (0, 1), got {b}"))
            }
            (s, Some(_)) if s != Strategy::LogUniform => {
                return bad("beta1 is only accepted with log_uniform spacing".into())
            }
            _ => {}
        }
        if self.j == Some(0) {
            return bad("J must be at least 1".into());
        }
        Ok(())
    }

    pub fn j_or_default(&self) -> usize {
        self.j.unwrap_or(DEFAULT_J)
    }

    pub fn beta1_or_default(&self) -> f64 {
        self.beta1.unwrap_or(DEFAULT_BETA1)
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }
}
