//! Riemann-sum likelihood bounds with their KL-sum gaps.
//!
//! Also the duality identities linking `ψ` and its derivatives to KL
//! divergences along the path.

use serde::Serialize;

use crate::error::{Result, TvoError};
use crate::models::PathFamily;
use crate::numeric::simpson_fn;
use crate::schedules::{linear_schedule, Schedule};

/// Simpson points used by the integral-form identities.
pub const QUADRATURE_POINTS: usize = 1001;

/// Step of the five-point third-derivative probe.
pub const THIRD_DERIVATIVE_STEP: f64 = 1e-3;

fn check_lengths(etas: &[f64], schedule: &Schedule) -> Result<()> {
    let expected = schedule.betas().len();
    if etas.len() != expected {
        return Err(TvoError::LengthMismatch {
            expected,
            actual: etas.len(),
        });
    }
    Ok(())
}

/// Left Riemann sum `Σ_k (β_k - β_{k-1}) η(β_{k-1})`.
pub fn tvo_lower(etas: &[f64], schedule: &Schedule) -> Result<f64> {
    check_lengths(etas, schedule)?;
    Ok(schedule
        .widths()
        .iter()
        .zip(etas)
        .map(|(w, e)| w * e)
        .sum())
}

/// Right Riemann sum `Σ_k (β_k - β_{k-1}) η(β_k)`.
pub fn tvo_upper(etas: &[f64], schedule: &Schedule) -> Result<f64> {
    check_lengths(etas, schedule)?;
    Ok(schedule
        .widths()
        .iter()
        .zip(&etas[1..])
        .map(|(w, e)| w * e)
        .sum())
}

/// `η(β_k)` at every point of the schedule.
pub fn etas_on<F: PathFamily + ?Sized>(family: &F, schedule: &Schedule) -> Result<Vec<f64>> {
    schedule.betas().iter().map(|&b| family.eta(b)).collect()
}

/// Both bounds, the endpoint bounds and (for exact models) both gaps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub tvo_lower: f64,
    pub tvo_upper: f64,
    pub elbo: f64,
    pub eubo: f64,
    pub log_px: Option<f64>,
    pub gap_lower: Option<f64>,
    pub gap_upper: Option<f64>,
    pub per_interval_kl_forward: Vec<f64>,
    pub per_interval_kl_reverse: Vec<f64>,
}

impl BoundReport {
    /// Report from an integrand table alone (e.g. SNIS estimates); no gaps.
    pub fn from_etas(etas: &[f64], schedule: &Schedule) -> Result<Self> {
        Ok(Self {
            tvo_lower: tvo_lower(etas, schedule)?,
            tvo_upper: tvo_upper(etas, schedule)?,
            elbo: etas[0],
            eubo: etas[etas.len() - 1],
            log_px: None,
            gap_lower: None,
            gap_upper: None,
            per_interval_kl_forward: Vec::new(),
            per_interval_kl_reverse: Vec::new(),
        })
    }

    /// Full report for an exact model.
    pub fn exact<F: PathFamily + ?Sized>(family: &F, schedule: &Schedule) -> Result<Self> {
        let etas = etas_on(family, schedule)?;
        let (gap_lower, fwd) = gap_decomposition_lower(family, schedule)?;
        let (gap_upper, rev) = gap_decomposition_upper(family, schedule)?;
        Ok(Self {
            tvo_lower: tvo_lower(&etas, schedule)?,
            tvo_upper: tvo_upper(&etas, schedule)?,
            elbo: family.eta(0.0)?,
            eubo: family.eta(1.0)?,
            log_px: Some(family.log_px()),
            gap_lower: Some(gap_lower),
            gap_upper: Some(gap_upper),
            per_interval_kl_forward: fwd,
            per_interval_kl_reverse: rev,
        })
    }
}

/// `KL[π_a || π_b]`, the Bregman divergence `D_ψ[β_b : β_a]`.
pub fn kl_between_path_points<F: PathFamily + ?Sized>(family: &F, beta_a: f64, beta_b: f64) -> Result<f64> {
    family.kl(beta_a, beta_b)
}

/// `ψ(β_b) - ψ(β_a) - (β_b - β_a) η(β_a)`, the Bregman form of `KL[π_a || π_b]`.
pub fn bregman_form<F: PathFamily + ?Sized>(family: &F, beta_a: f64, beta_b: f64) -> Result<f64> {
    let a = family.moments(beta_a)?;
    let psi_b = family.psi(beta_b)?;
    Ok(psi_b - a.psi - (beta_b - beta_a) * a.eta)
}

/// `log p(x) - TVO_L` and the forward KLs `KL[π_{k-1} || π_k]`.
pub fn gap_decomposition_lower<F: PathFamily + ?Sized>(
    family: &F,
    schedule: &Schedule,
) -> Result<(f64, Vec<f64>)> {
    let etas = etas_on(family, schedule)?;
    let gap = family.log_px() - tvo_lower(&etas, schedule)?;
    let terms = schedule
        .betas()
        .windows(2)
        .map(|w| family.kl(w[0], w[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok((gap, terms))
}

/// `TVO_U - log p(x)` and the reverse KLs `KL[π_k || π_{k-1}]`.
pub fn gap_decomposition_upper<F: PathFamily + ?Sized>(
    family: &F,
    schedule: &Schedule,
) -> Result<(f64, Vec<f64>)> {
    let etas = etas_on(family, schedule)?;
    let gap = tvo_upper(&etas, schedule)? - family.log_px();
    let terms = schedule
        .betas()
        .windows(2)
        .map(|w| family.kl(w[1], w[0]))
        .collect::<Result<Vec<_>>>()?;
    Ok((gap, terms))
}

/// Conjugate `ψ*(η_β) = β η(β) - ψ(β)`, equal to `KL[π_β || q]`.
pub fn conjugate_psi_star<F: PathFamily + ?Sized>(family: &F, beta: f64) -> Result<f64> {
    let m = family.moments(beta)?;
    Ok(beta * m.eta - m.psi)
}

/// Residual of `D_ψ[β_a : β_b] = ψ*(η_b) + ψ(β_a) - η_b β_a`.
///
/// The left side is the directly computed `KL[π_b || π_a]`; `ψ*(η_b)` on the
/// right is the directly computed `KL[π_b || π_0]`.
pub fn dual_divergence_check<F: PathFamily + ?Sized>(family: &F, beta_a: f64, beta_b: f64) -> Result<f64> {
    let primal = family.kl(beta_b, beta_a)?;
    let psi_star = family.kl(beta_b, 0.0)?;
    let eta_b = family.eta(beta_b)?;
    let dual = psi_star + family.psi(beta_a)? - eta_b * beta_a;
    Ok((primal - dual).abs())
}

/// `(KL_fwd + KL_rev, (β_b - β_a)(η_b - η_a))`.
pub fn symm_kl_rectangle<F: PathFamily + ?Sized>(family: &F, beta_a: f64, beta_b: f64) -> Result<(f64, f64)> {
    let lhs = family.kl(beta_a, beta_b)? + family.kl(beta_b, beta_a)?;
    let rhs = (beta_b - beta_a) * (family.eta(beta_b)? - family.eta(beta_a)?);
    Ok((lhs, rhs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL[π_a || π_b] = ∫_a^b (β_b - β) Var dβ`.
    Forward,
    /// `KL[π_b || π_a] = ∫_a^b (β - β_a) Var dβ`.
    Reverse,
}

/// Taylor-remainder integral form of the KL between two path points.
pub fn kl_variance_integral<F: PathFamily + ?Sized>(
    family: &F,
    beta_a: f64,
    beta_b: f64,
    direction: KlDirection,
    points: usize,
) -> Result<f64> {
    simpson_fn(beta_a, beta_b, points, |beta| {
        let weight = match direction {
            KlDirection::Forward => beta_b - beta,
            KlDirection::Reverse => beta - beta_a,
        };
        Ok(weight * family.var(beta)?)
    })
}

/// `(β_b - β_a) ∫_a^b Var dβ`, the Fisher-information form of the symmetrized KL.
pub fn symm_kl_fisher_integral<F: PathFamily + ?Sized>(
    family: &F,
    beta_a: f64,
    beta_b: f64,
    points: usize,
) -> Result<f64> {
    Ok((beta_b - beta_a) * simpson_fn(beta_a, beta_b, points, |b| family.var(b))?)
}

/// Rényi bound `L_{1-β} = ψ(β) / β`; the β → 0 limit is `η(0)`.
pub fn renyi_objective<F: PathFamily + ?Sized>(family: &F, beta: f64) -> Result<f64> {
    if beta == 0.0 {
        return family.eta(0.0);
    }
    Ok(family.psi(beta)? / beta)
}

/// Five-point central difference of `ψ'''` at `beta`.
pub fn third_derivative_probe<F: PathFamily + ?Sized>(family: &F, beta: f64, step: f64) -> Result<f64> {
    let f = |b: f64| family.psi(b);
    Ok((-f(beta - 2.0 * step)? + 2.0 * f(beta - step)? - 2.0 * f(beta + step)? + f(beta + 2.0 * step)?)
        / (2.0 * step.powi(3)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecondOrderReport {
    pub value: f64,
    pub tvo_lower: f64,
    /// Smallest and largest probed `ψ'''` over `[0, 1]`.
    pub min_third_derivative: f64,
    pub max_third_derivative: f64,
    /// True when every probe has `ψ''' >= 0`. The Taylor remainder
    /// `∫ ½ (β_k - β)² ψ'''(β) dβ` is then nonnegative, so the objective stays
    /// below `log p(x)`. With `ψ''' <= 0` it overshoots.
    pub valid_lower_bound: bool,
}

/// `TVO_L + Σ_k ½ (β_k - β_{k-1})² Var(β_{k-1})` with a sign probe on `ψ'''`.
pub fn second_order_tvo<F: PathFamily + ?Sized>(family: &F, schedule: &Schedule) -> Result<SecondOrderReport> {
    let betas = schedule.betas();
    let mut lower = 0.0;
    let mut correction = 0.0;
    for (w, width) in betas.windows(2).zip(schedule.widths()) {
        let m = family.moments(w[0])?;
        lower += width * m.eta;
        correction += 0.5 * width * width * m.var;
    }
    let mut min_third = f64::INFINITY;
    let mut max_third = f64::NEG_INFINITY;
    let mut valid = true;
    for i in 0..=20 {
        let beta = i as f64 / 20.0;
        let third = third_derivative_probe(family, beta, THIRD_DERIVATIVE_STEP)?;
        // rounding in ψ is amplified by 1/h³
        let noise = 1e-6 * (1.0 + family.psi(beta)?.abs());
        valid &= third >= -noise;
        min_third = min_third.min(third);
        max_third = max_third.max(third);
    }
    Ok(SecondOrderReport {
        value: lower + correction,
        tvo_lower: lower,
        min_third_derivative: min_third,
        max_third_derivative: max_third,
        valid_lower_bound: valid,
    })
}

/// `(K, K · Σ_k KL[π_{k-1} || π_k])` under linear spacing.
pub fn asymptotic_rate_check<F: PathFamily + ?Sized>(family: &F, ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    ks.iter()
        .map(|&k| {
            let s = linear_schedule(k)?;
            let (_, terms) = gap_decomposition_lower(family, &s)?;
            Ok((k, k as f64 * terms.iter().sum::<f64>()))
        })
        .collect()
}

/// Limit of [`asymptotic_rate_check`]: half the symmetrized KL between the endpoints.
pub fn asymptotic_rate_limit<F: PathFamily + ?Sized>(family: &F) -> Result<f64> {
    Ok(0.5 * (family.kl(0.0, 1.0)? + family.kl(1.0, 0.0)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::DiscreteLatentModel;
    use approx::assert_abs_diff_eq;

    fn two_state() -> DiscreteLatentModel {
        DiscreteLatentModel::new(&[0.5, 0.5], &[0.1, 0.3]).unwrap()
    }

    fn half() -> Schedule {
        linear_schedule(2).unwrap()
    }

    #[test]
    fn riemann_sums_on_two_state_model() {
        let m = two_state();
        let etas = etas_on(&m, &half()).unwrap();
        let lo = tvo_lower(&etas, &half()).unwrap();
        let up = tvo_upper(&etas, &half()).unwrap();
        assert_abs_diff_eq!(lo, 0.5 * etas[0] + 0.5 * etas[1], epsilon = 1e-15);
        assert_abs_diff_eq!(lo, -0.9865, epsilon = 5e-5);
        assert_abs_diff_eq!(up, -0.8492, epsilon = 5e-5);
        let one = linear_schedule(1).unwrap();
        let e1 = etas_on(&m, &one).unwrap();
        assert_eq!(tvo_lower(&e1, &one).unwrap(), m.eta(0.0).unwrap());
        assert_eq!(tvo_upper(&e1, &one).unwrap(), m.eta(1.0).unwrap());
        assert!(tvo_lower(&[0.0], &half()).is_err());
    }

    #[test]
    fn gaps_on_two_state_model() {
        let m = two_state();
        let (gap, terms) = gap_decomposition_lower(&m, &half()).unwrap();
        assert_abs_diff_eq!(gap, terms.iter().sum::<f64>(), epsilon = 1e-12);
        assert_abs_diff_eq!(gap, 0.0702, epsilon = 1e-4);
        let (gap_u, rev) = gap_decomposition_upper(&m, &half()).unwrap();
        assert_abs_diff_eq!(gap_u, rev.iter().sum::<f64>(), epsilon = 1e-12);

        let one = linear_schedule(1).unwrap();
        let (g1, _) = gap_decomposition_lower(&m, &one).unwrap();
        let kl_q_post: f64 = [0.5f64, 0.5]
            .iter()
            .zip([0.25, 0.75])
            .map(|(q, p)| q * (q / p).ln())
            .sum();
        assert_abs_diff_eq!(g1, kl_q_post, epsilon = 1e-14);
        let (gu1, _) = gap_decomposition_upper(&m, &one).unwrap();
        let kl_post_q: f64 = [0.25f64, 0.75]
            .iter()
            .zip([0.5, 0.5])
            .map(|(p, q)| p * (p / q).ln())
            .sum();
        assert_abs_diff_eq!(gu1, kl_post_q, epsilon = 1e-14);
    }

    #[test]
    fn flat_integrand_has_zero_gaps() {
        let m = DiscreteLatentModel::with_exact_posterior(&[0.1, 0.3]).unwrap();
        let r = BoundReport::exact(&m, &linear_schedule(5).unwrap()).unwrap();
        assert_abs_diff_eq!(r.tvo_lower, 0.4f64.ln(), epsilon = 1e-14);
        assert_abs_diff_eq!(r.tvo_upper, 0.4f64.ln(), epsilon = 1e-14);
        assert!(r.gap_lower.unwrap().abs() < 1e-14);
        assert!(r.per_interval_kl_forward.iter().all(|&k| k < 1e-15));
    }

    #[test]
    fn conjugate_and_rectangle_reference_values() {
        let m = two_state();
        assert_abs_diff_eq!(conjugate_psi_star(&m, 0.0).unwrap(), 0.0, epsilon = 1e-15);
        let c = conjugate_psi_star(&m, 0.5).unwrap();
        assert_abs_diff_eq!(c, m.kl(0.5, 0.0).unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(c, 0.0363, epsilon = 5e-5);
        let c1 = conjugate_psi_star(&m, 1.0).unwrap();
        assert_abs_diff_eq!(c1, m.eta(1.0).unwrap() - m.log_px(), epsilon = 1e-14);
        assert_abs_diff_eq!(c1, 0.1308, epsilon = 5e-5);

        let (lhs, rhs) = symm_kl_rectangle(&m, 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
        assert_abs_diff_eq!(lhs, 0.2747, epsilon = 5e-5);
        let (l0, r0) = symm_kl_rectangle(&m, 0.4, 0.4).unwrap();
        assert!(l0.abs() < 1e-15 && r0 == 0.0);
        assert!(dual_divergence_check(&m, 1.0, 0.5).unwrap() < 1e-12);
        assert!(dual_divergence_check(&m, 0.3, 0.3).unwrap().abs() < 1e-15);
    }

    #[test]
    fn variance_integrals_match_direct_kls() {
        let m = two_state();
        let fwd = kl_variance_integral(&m, 0.0, 0.5, KlDirection::Forward, QUADRATURE_POINTS).unwrap();
        assert_abs_diff_eq!(fwd, m.kl(0.0, 0.5).unwrap(), epsilon = 1e-10);
        let f = kl_variance_integral(&m, 0.0, 1.0, KlDirection::Forward, QUADRATURE_POINTS).unwrap();
        let r = kl_variance_integral(&m, 0.0, 1.0, KlDirection::Reverse, QUADRATURE_POINTS).unwrap();
        assert_abs_diff_eq!(f + r, 0.2747, epsilon = 5e-5);
        let fisher = symm_kl_fisher_integral(&m, 0.0, 1.0, QUADRATURE_POINTS).unwrap();
        assert_abs_diff_eq!(f + r, fisher, epsilon = 1e-12);
        assert!(kl_variance_integral(&m, 0.0, 1.0, KlDirection::Forward, 2).is_err());
    }

    #[test]
    fn renyi_reference_values() {
        let m = two_state();
        assert_abs_diff_eq!(renyi_objective(&m, 1.0).unwrap(), m.log_px(), epsilon = 1e-15);
        assert_abs_diff_eq!(renyi_objective(&m, 0.5).unwrap(), -0.9856, epsilon = 5e-5);
        assert_eq!(renyi_objective(&m, 0.0).unwrap(), m.eta(0.0).unwrap());
        assert_abs_diff_eq!(
            renyi_objective(&m, 0.5).unwrap(),
            m.renyi_bound_direct(0.5).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn second_order_on_two_state_model() {
        let m = two_state();
        let r = second_order_tvo(&m, &linear_schedule(1).unwrap()).unwrap();
        assert_abs_diff_eq!(r.value, m.eta(0.0).unwrap() + 0.5 * m.var(0.0).unwrap(), epsilon = 1e-15);
        // -1.0601 + 0.1509, each rounded to four places
        assert_abs_diff_eq!(r.value, -0.9092, epsilon = 1e-4);
        assert!(r.value > m.log_px());
        assert!(!r.valid_lower_bound);
    }

    #[test]
    fn asymptotic_rate_on_two_state_model() {
        let m = two_state();
        let limit = asymptotic_rate_limit(&m).unwrap();
        assert_abs_diff_eq!(limit, 0.1373, epsilon = 5e-5);
        let rates = asymptotic_rate_check(&m, &[8, 32, 128]).unwrap();
        let devs: Vec<f64> = rates.iter().map(|(_, r)| (r - limit).abs()).collect();
        assert!(devs[0] > devs[1] && devs[1] > devs[2]);
        assert!(devs[2] / limit < 0.02);
    }
}
