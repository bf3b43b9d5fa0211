//! Shared fixtures for the criterion benches.

use nalgebra::{dmatrix, dvector, DVector};
use tvo_core::{GaussianPath, LinearGaussianModel, LogWeightGrid, Result};

/// Two-dimensional observation, one latent: `x = [2, 1] z + ε`, `σ = 0.5`.
pub fn canonical_model() -> Result<(LinearGaussianModel, DVector<f64>)> {
    let model = LinearGaussianModel::new(dmatrix![2.0; 1.0], dvector![0.0, 0.0], 0.5, dvector![0.0], dvector![1.0])?;
    Ok((model, dvector![0.4, -0.2]))
}

pub fn canonical_path() -> Result<GaussianPath> {
    let (model, x) = canonical_model()?;
    model.path(x)
}

/// Deterministic `S × N` grid of heavy-ish tailed log weights.
pub fn log_weight_grid(samples: usize, datapoints: usize) -> Result<LogWeightGrid> {
    let columns = (0..datapoints)
        .map(|j| {
            (0..samples)
                .map(|i| {
                    let u = ((i * 7919 + j * 104_729) % 10_007) as f64 / 10_007.0;
                    -3.0 * u * u + (j as f64 * 0.1).sin()
                })
                .collect()
        })
        .collect();
    LogWeightGrid::from_columns(columns)
}
