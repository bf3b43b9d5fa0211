//! Self-normalized importance sampling over one shared sample set.
//!
//! A single grid of log importance weights `log w_ij` (sample `i`, datapoint
//! `j`) is reweighted by `w^β` to estimate expectations under every `π_β`.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, TvoError};
use crate::numeric::{log_mean_exp, softmax, weighted_mean, weighted_var};

/// `S × N` matrix of finite log importance weights, stored column by column.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogWeightGrid {
    samples: usize,
    datapoints: usize,
    data: Vec<f64>,
}

impl LogWeightGrid {
    /// Builds a grid from per-datapoint columns of equal length.
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let datapoints = columns.len();
        let samples = columns.first().map_or(0, Vec::len);
        if samples == 0 || datapoints == 0 {
            return Err(TvoError::InvalidGrid("need S >= 1 and N >= 1".into()));
        }
        if let Some(c) = columns.iter().find(|c| c.len() != samples) {
            return Err(TvoError::LengthMismatch {
                expected: samples,
                actual: c.len(),
            });
        }
        let data: Vec<f64> = columns.into_iter().flatten().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TvoError::InvalidGrid("non-finite log weight".into()));
        }
        Ok(Self {
            samples,
            datapoints,
            data,
        })
    }

    /// Builds a grid from sample rows (`rows[i][j]` is sample `i` of datapoint `j`).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != n) {
            return Err(TvoError::LengthMismatch {
                expected: n,
                actual: r.len(),
            });
        }
        Self::from_columns((0..n).map(|j| rows.iter().map(|r| r[j]).collect()).collect())
    }

    pub fn num_samples(&self) -> usize {
        self.samples
    }

    pub fn num_datapoints(&self) -> usize {
        self.datapoints
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.samples..(j + 1) * self.samples]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.samples)
    }

    /// Reads CSV with one row per sample and one column per datapoint, no header.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let row = record
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| TvoError::InvalidGrid(format!("bad number {f:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }

    /// Writes the grid as CSV with 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        for i in 0..self.samples {
            wtr.write_record((0..self.datapoints).map(|j| format!("{:.16e}", self.column(j)[i])))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Self-normalized weights `w_i^β / Σ_s w_s^β`, one column per datapoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SnisWeights {
    pub beta: f64,
    samples: usize,
    normalized: Vec<f64>,
}

impl SnisWeights {
    pub fn column(&self, j: usize) -> &[f64] {
        &self.normalized[j * self.samples..(j + 1) * self.samples]
    }

    pub fn num_datapoints(&self) -> usize {
        self.normalized.len() / self.samples
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !beta.is_finite() {
        return Err(TvoError::NonFiniteBeta(beta));
    }
    if beta < 0.0 {
        return Err(TvoError::BetaOutOfRange(beta, "[0, inf)"));
    }
    Ok(())
}

/// Softmax of `β · log w` down one column.
pub fn snis_column_weights(log_w: &[f64], beta: f64) -> Vec<f64> {
    let scaled: Vec<f64> = log_w.iter().map(|l| beta * l).collect();
    softmax(&scaled)
}

/// `(η̂, Var̂)` for one column.
pub fn snis_column_moments(log_w: &[f64], beta: f64) -> (f64, f64) {
    let probs = snis_column_weights(log_w, beta);
    (weighted_mean(&probs, log_w), weighted_var(&probs, log_w))
}

pub fn snis_normalize(grid: &LogWeightGrid, beta: f64) -> Result<SnisWeights> {
    check_beta(beta)?;
    let normalized = grid
        .columns()
        .flat_map(|c| snis_column_weights(c, beta))
        .collect();
    Ok(SnisWeights {
        beta,
        samples: grid.samples,
        normalized,
    })
}

/// Per-datapoint SNIS estimate of `η_β = E_{π_β}[log w]`.
pub fn snis_eta(grid: &LogWeightGrid, beta: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    Ok(grid
        .data
        .par_chunks(grid.samples)
        .map(|c| snis_column_moments(c, beta).0)
        .collect())
}

/// Per-datapoint weighted population variance of `log w` under `π_β`.
pub fn snis_var(grid: &LogWeightGrid, beta: f64) -> Result<Vec<f64>> {
    check_beta(beta)?;
    Ok(grid
        .data
        .par_chunks(grid.samples)
        .map(|c| snis_column_moments(c, beta).1)
        .collect())
}

/// Batch mean of [`snis_eta`], the pooled integrand used by the schedules.
pub fn snis_eta_mean(grid: &LogWeightGrid, beta: f64) -> Result<f64> {
    let etas = snis_eta(grid, beta)?;
    Ok(etas.iter().sum::<f64>() / etas.len() as f64)
}

/// Per-datapoint IWAE bound `log (1/S) Σ_i w_i`.
pub fn iwae_bound(grid: &LogWeightGrid) -> Vec<f64> {
    grid.columns().map(log_mean_exp).collect()
}
