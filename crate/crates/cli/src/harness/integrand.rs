use std::path::Path;

use serde::Serialize;
use tvo_core::numeric::linspace;
use tvo_core::snis::{snis_eta, snis_var};
use tvo_core::{LogWeightGrid, PathFamily};

use super::config::ExperimentConfig;
use super::error::{HarnessError, Result};
use super::{ensure_output_dir, fmt_float, load_model};

pub const INTEGRAND_ROWS: usize = 201;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntegrandRow {
    pub beta: f64,
    pub eta: f64,
    pub var: f64,
}

/// `(β, η, Var)` on an even grid, from an exact model or, when given, a
/// log-weight grid (batch means of the SNIS estimates).
pub fn emit_integrand(config: &ExperimentConfig, log_weights: Option<&Path>) -> Result<Vec<IntegrandRow>> {
    let betas = linspace(0.0, 1.0, INTEGRAND_ROWS);
    match log_weights {
        Some(path) => {
            let file = std::fs::File::open(path)?;
            let grid = LogWeightGrid::read_csv(file)?;
            let n = grid.num_datapoints() as f64;
            betas
                .into_iter()
                .map(|beta| {
                    let eta = snis_eta(&grid, beta)?.iter().sum::<f64>() / n;
                    let var = snis_var(&grid, beta)?.iter().sum::<f64>() / n;
                    Ok(IntegrandRow { beta, eta, var })
                })
                .collect::<tvo_core::Result<Vec<_>>>()
                .map_err(HarnessError::from)
        }
        None => {
            let model = load_model(config, "integrand")?.build()?;
            betas
                .into_iter()
                .map(|beta| {
                    let m = model.moments(beta)?;
                    Ok(IntegrandRow {
                        beta,
                        eta: m.eta,
                        var: m.var,
                    })
                })
                .collect::<tvo_core::Result<Vec<_>>>()
                .map_err(HarnessError::from)
        }
    }
}

pub fn write_integrand(config: &ExperimentConfig, rows: &[IntegrandRow]) -> Result<std::path::PathBuf> {
    ensure_output_dir(config)?;
    let path = config.output_path("integrand.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["beta", "eta", "var"])?;
    for r in rows {
        w.write_record([fmt_float(r.beta), fmt_float(r.eta), fmt_float(r.var)])?;
    }
    w.flush()?;
    Ok(path)
}
