use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{DiscreteLatentModel, GaussianPath, LinearGaussianModel, PathFamily, PathMoments};
use crate::error::{Result, TvoError};

/// JSON model definition.
///
/// ```json
/// {"type": "discrete", "q": [0.5, 0.5], "p": [0.1, 0.3]}
/// {"type": "linear_gaussian", "A": [[1.0]], "b": [0.0], "sigma": 0.5, "m": [0.0], "t": [1.0]}
/// ```
///
/// The Gaussian form takes an optional `"x"` datapoint; it defaults to zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelSpec {
    Discrete {
        q: Vec<f64>,
        p: Vec<f64>,
    },
    LinearGaussian {
        #[serde(rename = "A")]
        a: Vec<Vec<f64>>,
        b: Vec<f64>,
        sigma: f64,
        m: Vec<f64>,
        t: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x: Option<Vec<f64>>,
    },
}

impl ModelSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The Gaussian generative model, if this file describes one.
    pub fn linear_gaussian(&self) -> Result<Option<(LinearGaussianModel, DVector<f64>)>> {
        match self {
            ModelSpec::Discrete { .. } => Ok(None),
            ModelSpec::LinearGaussian { a, b, sigma, m, t, x } => {
                let rows = a.len();
                let cols = a.first().map_or(0, Vec::len);
                if a.iter().any(|r| r.len() != cols) {
                    return Err(TvoError::InvalidModel("ragged decoder matrix A".into()));
                }
                let weight = DMatrix::from_fn(rows, cols, |i, j| a[i][j]);
                let model = LinearGaussianModel::new(
                    weight,
                    DVector::from_column_slice(b),
                    *sigma,
                    DVector::from_column_slice(m),
                    DVector::from_column_slice(t),
                )?;
                let x = match x {
                    Some(x) => DVector::from_column_slice(x),
                    None => DVector::zeros(rows),
                };
                Ok(Some((model, x)))
            }
        }
    }

    pub fn build(&self) -> Result<ExactModel> {
        match self {
            ModelSpec::Discrete { q, p } => Ok(ExactModel::Discrete(DiscreteLatentModel::new(q, p)?)),
            ModelSpec::LinearGaussian { .. } => {
                let (model, x) = self.linear_gaussian()?.expect("gaussian model");
                Ok(ExactModel::Gaussian(model.path(x)?))
            }
        }
    }
}

/// Either exactly evaluable model kind, bound to one datapoint.
#[derive(Debug, Clone, PartialEq)]
pub enum ExactModel {
    Discrete(DiscreteLatentModel),
    Gaussian(GaussianPath),
}

impl ExactModel {
    pub fn kind(&self) -> &'static str {
        match self {
            ExactModel::Discrete(_) => "discrete",
            ExactModel::Gaussian(_) => "linear_gaussian",
        }
    }
}

impl PathFamily for ExactModel {
    fn moments(&self, beta: f64) -> Result<PathMoments> {
        match self {
            ExactModel::Discrete(m) => m.moments(beta),
            ExactModel::Gaussian(m) => m.moments(beta),
        }
    }

    fn log_px(&self) -> f64 {
        match self {
            ExactModel::Discrete(m) => m.log_px(),
            ExactModel::Gaussian(m) => m.log_px(),
        }
    }

    fn kl(&self, beta_a: f64, beta_b: f64) -> Result<f64> {
        match self {
            ExactModel::Discrete(m) => m.kl(beta_a, beta_b),
            ExactModel::Gaussian(m) => m.kl(beta_a, beta_b),
        }
    }

    fn renyi_bound_direct(&self, alpha: f64) -> Result<f64> {
        match self {
            ExactModel::Discrete(m) => m.renyi_bound_direct(alpha),
            ExactModel::Gaussian(m) => m.renyi_bound_direct(alpha),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn parses_both_model_kinds() {
        let d = ModelSpec::from_json(r#"{"type":"discrete","q":[0.5,0.5],"p":[0.1,0.3]}"#)
            .unwrap()
            .build()
            .unwrap();
        assert_eq!(d.kind(), "discrete");
        assert_abs_diff_eq!(d.log_px(), 0.4f64.ln(), epsilon = 1e-15);

        let g = ModelSpec::from_json(
            r#"{"type":"linear_gaussian","A":[[1.0],[0.5]],"b":[0.0,0.1],"sigma":0.5,"m":[0.2],"t":[0.9],"x":[0.3,0.2]}"#,
        )
        .unwrap()
        .build()
        .unwrap();
        assert_eq!(g.kind(), "linear_gaussian");
        assert_abs_diff_eq!(g.psi(1.0).unwrap(), g.log_px(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_malformed_specs() {
        assert!(ModelSpec::from_json(r#"{"type":"discrete","q":[1.0],"p":[0.1]}"#)
            .unwrap()
            .build()
            .is_err());
        assert!(ModelSpec::from_json(r#"{"type":"mystery"}"#).is_err());
        let ragged = r#"{"type":"linear_gaussian","A":[[1.0],[0.5, 1.0]],"b":[0.0,0.1],"sigma":0.5,"m":[0.2],"t":[0.9]}"#;
        assert!(ModelSpec::from_json(ragged).unwrap().build().is_err());
    }
}
