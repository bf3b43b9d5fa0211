use serde::{Deserialize, Serialize};

use super::PathFamily;
use crate::error::{Result, TvoError};
use crate::numeric::{linspace, simpson};

/// Minimum number of points for [`ti_identity_check`].
pub const MIN_TI_POINTS: usize = 101;

/// Slack allowed on monotonicity of `η` from rounding on flat integrands.
const ETA_MONOTONE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentPoint {
    pub beta: f64,
    pub psi: f64,
    pub eta: f64,
    pub var: f64,
}

/// Tabulated `(β, ψ, η, Var)` along the path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCurve {
    points: Vec<MomentPoint>,
}

impl MomentCurve {
    pub fn new(points: Vec<MomentPoint>) -> Result<Self> {
        for w in points.windows(2) {
            if !(w[1].beta > w[0].beta) {
                return Err(TvoError::InvalidCurve {
                    min_points: 2,
                    reason: format!("betas not increasing at {}", w[1].beta),
                });
            }
            let slack = ETA_MONOTONE_SLACK * (1.0 + w[0].eta.abs());
            if w[1].eta < w[0].eta - slack {
                return Err(TvoError::InvalidCurve {
                    min_points: 2,
                    reason: format!("eta decreases at beta {}", w[1].beta),
                });
            }
        }
        if let Some(p) = points.iter().find(|p| !(p.var >= 0.0)) {
            return Err(TvoError::InvalidCurve {
                min_points: 2,
                reason: format!("negative variance at beta {}", p.beta),
            });
        }
        Ok(Self { points })
    }

    /// Evaluates the family at the given betas.
    pub fn tabulate<F: PathFamily + ?Sized>(family: &F, betas: &[f64]) -> Result<Self> {
        let points = betas
            .iter()
            .map(|&beta| {
                let m = family.moments(beta)?;
                Ok(MomentPoint {
                    beta,
                    psi: m.psi,
                    eta: m.eta,
                    var: m.var,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(points)
    }

    /// Evaluates the family on `n` evenly spaced betas over `[0, 1]`.
    pub fn uniform<F: PathFamily + ?Sized>(family: &F, n: usize) -> Result<Self> {
        Self::tabulate(family, &linspace(0.0, 1.0, n))
    }

    pub fn points(&self) -> &[MomentPoint] {
        &self.points
    }

    pub fn betas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.beta).collect()
    }

    pub fn etas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.eta).collect()
    }
}

/// `|∫₀¹ η dβ - (ψ(1) - ψ(0))|` with composite Simpson over the curve's grid.
pub fn ti_identity_check(curve: &MomentCurve) -> Result<f64> {
    let pts = curve.points();
    if pts.len() < MIN_TI_POINTS {
        return Err(TvoError::InvalidCurve {
            min_points: MIN_TI_POINTS,
            reason: format!("only {} points", pts.len()),
        });
    }
    let (first, last) = (pts[0], pts[pts.len() - 1]);
    if first.beta != 0.0 || last.beta != 1.0 {
        return Err(TvoError::InvalidCurve {
            min_points: MIN_TI_POINTS,
            reason: format!("spans [{}, {}]", first.beta, last.beta),
        });
    }
    // integrating η - η(0) keeps a flat integrand exact on long grids
    let offsets: Vec<f64> = curve.etas().iter().map(|e| e - first.eta).collect();
    let integral = first.eta + simpson(&curve.betas(), &offsets)?;
    Ok((integral - (last.psi - first.psi)).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::DiscreteLatentModel;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ti_identity_on_two_state_model() {
        let m = DiscreteLatentModel::new(&[0.5, 0.5], &[0.1, 0.3]).unwrap();
        let curve = MomentCurve::uniform(&m, 1001).unwrap();
        assert!(ti_identity_check(&curve).unwrap() < 1e-8);
        let pts = curve.points();
        let delta = pts[pts.len() - 1].psi - pts[0].psi;
        assert_abs_diff_eq!(delta, 0.4f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn flat_integrand_integrates_exactly_on_any_grid() {
        let m = DiscreteLatentModel::with_exact_posterior(&[0.2, 0.1, 0.4]).unwrap();
        let mut betas = linspace(0.0, 1.0, 101);
        betas[50] = 0.4937; // uneven spacing
        let curve = MomentCurve::tabulate(&m, &betas).unwrap();
        assert!(ti_identity_check(&curve).unwrap() < 1e-14);
    }

    #[test]
    fn residual_shrinks_with_refinement() {
        let m = DiscreteLatentModel::new(&[0.1, 0.6, 0.3], &[0.02, 0.001, 0.3]).unwrap();
        let coarse = ti_identity_check(&MomentCurve::uniform(&m, 101).unwrap()).unwrap();
        let fine = ti_identity_check(&MomentCurve::uniform(&m, 1001).unwrap()).unwrap();
        assert!(fine <= coarse);
        assert!(fine < 1e-8);
    }

    #[test]
    fn rejects_curves_not_spanning_unit_interval() {
        let m = DiscreteLatentModel::new(&[0.5, 0.5], &[0.1, 0.3]).unwrap();
        let short = MomentCurve::tabulate(&m, &linspace(0.0, 0.9, 201)).unwrap();
        assert!(ti_identity_check(&short).is_err());
        let sparse = MomentCurve::uniform(&m, 11).unwrap();
        assert!(ti_identity_check(&sparse).is_err());
    }

    #[test]
    fn rejects_broken_invariants() {
        let p = |beta, eta, var| MomentPoint {
            beta,
            psi: 0.0,
            eta,
            var,
        };
        assert!(MomentCurve::new(vec![p(0.0, 0.0, 0.0), p(0.0, 0.0, 0.0)]).is_err());
        assert!(MomentCurve::new(vec![p(0.0, 1.0, 0.0), p(0.5, 0.0, 0.0)]).is_err());
        assert!(MomentCurve::new(vec![p(0.0, 0.0, -1.0)]).is_err());
    }
}
