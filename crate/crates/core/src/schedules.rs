//! Partitions `0 = β_0 < β_1 < … < β_K = 1` of the unit interval.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TvoError};
use crate::models::PathFamily;
use crate::numeric::linspace;
use crate::snis::{snis_eta_mean, LogWeightGrid};

/// Gap inserted between betas that collide after inversion.
pub const NUDGE: f64 = 1e-9;

/// Knot count used by the coarse-grained schedule unless overridden.
pub const DEFAULT_KNOTS: usize = 20;

/// Sorted partition of `[0, 1]` with `K ≥ 1` intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Schedule {
    betas: Vec<f64>,
}

impl Schedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(TvoError::InvalidSchedule(format!(
                "need at least two betas, got {}",
                betas.len()
            )));
        }
        if betas[0] != 0.0 || betas[betas.len() - 1] != 1.0 {
            return Err(TvoError::InvalidSchedule(format!(
                "must start at 0 and end at 1, got [{}, {}]",
                betas[0],
                betas[betas.len() - 1]
            )));
        }
        if let Some(w) = betas.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(TvoError::InvalidSchedule(format!(
                "not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        Ok(Self { betas })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Number of intervals `K`.
    pub fn num_intervals(&self) -> usize {
        self.betas.len() - 1
    }

    /// Interval widths `β_k - β_{k-1}`.
    pub fn widths(&self) -> Vec<f64> {
        self.betas.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Median of all betas, endpoints included.
    pub fn median(&self) -> f64 {
        let n = self.betas.len();
        if n % 2 == 1 {
            self.betas[n / 2]
        } else {
            0.5 * (self.betas[n / 2 - 1] + self.betas[n / 2])
        }
    }

    /// The schedule with one extra point; `None` when `beta` is already present
    /// or falls outside `(0, 1)`.
    pub fn refined(&self, beta: f64) -> Option<Schedule> {
        if !(beta > 0.0 && beta < 1.0) || self.betas.contains(&beta) {
            return None;
        }
        let mut betas = self.betas.clone();
        let pos = betas.partition_point(|&b| b < beta);
        betas.insert(pos, beta);
        Schedule::new(betas).ok()
    }
}

impl TryFrom<Vec<f64>> for Schedule {
    type Error = TvoError;

    fn try_from(betas: Vec<f64>) -> Result<Self> {
        Schedule::new(betas)
    }
}

impl From<Schedule> for Vec<f64> {
    fn from(s: Schedule) -> Self {
        s.betas
    }
}

/// Maps `β ∈ [0, 1]` to a pooled estimate of the integrand `η_β`.
pub trait EtaEvaluator {
    fn eta(&self, beta: f64) -> Result<f64>;
}

/// Exact `η` of a path family.
pub struct ExactEta<'a, F: ?Sized>(pub &'a F);

impl<F: PathFamily + ?Sized> EtaEvaluator for ExactEta<'_, F> {
    fn eta(&self, beta: f64) -> Result<f64> {
        self.0.eta(beta)
    }
}

/// Batch-mean SNIS estimate of `η` from one log-weight grid.
pub struct SnisEta<'a>(pub &'a LogWeightGrid);

impl EtaEvaluator for SnisEta<'_> {
    fn eta(&self, beta: f64) -> Result<f64> {
        snis_eta_mean(self.0, beta)
    }
}

/// Mean of exact `η` over several datapoints.
pub struct PooledExactEta<'a, F>(pub &'a [F]);

impl<F: PathFamily> EtaEvaluator for PooledExactEta<'_, F> {
    fn eta(&self, beta: f64) -> Result<f64> {
        let mut acc = 0.0;
        for f in self.0 {
            acc += f.eta(beta)?;
        }
        Ok(acc / self.0.len() as f64)
    }
}

/// Any closure `β -> η`.
pub struct FnEta<F>(pub F);

impl<F: Fn(f64) -> Result<f64>> EtaEvaluator for FnEta<F> {
    fn eta(&self, beta: f64) -> Result<f64> {
        (self.0)(beta)
    }
}

pub fn linear_schedule(k: usize) -> Result<Schedule> {
    if k == 0 {
        return Err(TvoError::InvalidSchedule("K must be at least 1".into()));
    }
    Schedule::new(linspace(0.0, 1.0, k + 1))
}

/// `β_0 = 0`, then `β_1 … β_K` log-uniform from `beta1` to 1.
pub fn log_uniform_schedule(k: usize, beta1: f64) -> Result<Schedule> {
    if k < 2 {
        return Err(TvoError::InvalidSchedule(
            "log-uniform spacing needs K >= 2".into(),
        ));
    }
    if !(beta1 > 0.0 && beta1 < 1.0) {
        return Err(TvoError::InvalidSchedule(format!(
            "beta1 must lie in (0, 1), got {beta1}"
        )));
    }
    let mut betas = Vec::with_capacity(k + 1);
    betas.push(0.0);
    let log_b1 = beta1.ln();
    for i in 1..=k {
        let frac = (k - i) as f64 / (k - 1) as f64;
        betas.push((frac * log_b1).exp());
    }
    betas[1] = beta1;
    betas[k] = 1.0;
    Schedule::new(betas)
}

/// Bisection tolerance on `η` for the moment-spacing schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Tolerance {
    /// Fraction of `η(1) - η(0)`.
    Relative(f64),
    /// Nats.
    Absolute(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentsOptions {
    pub tol: Tolerance,
    pub max_iter: usize,
}

impl Default for MomentsOptions {
    fn default() -> Self {
        Self {
            tol: Tolerance::Relative(1e-3),
            max_iter: 60,
        }
    }
}

impl MomentsOptions {
    /// Fixed 0.1-nat threshold of the reference pseudo-code.
    pub fn reference_threshold() -> Self {
        Self {
            tol: Tolerance::Absolute(0.1),
            max_iter: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentsOutcome {
    pub schedule: Schedule,
    /// False when some bisection hit `max_iter` before reaching the tolerance.
    pub converged: bool,
    /// Absolute `η` tolerance actually used.
    pub tol: f64,
    /// Target `η` values, equally spaced from `η(0)` to `η(1)`.
    pub targets: Vec<f64>,
}

fn endpoints<E: EtaEvaluator + ?Sized>(eval: &E) -> Result<(f64, f64)> {
    let eta0 = eval.eta(0.0)?;
    let eta1 = eval.eta(1.0)?;
    let slack = 1e-12 * (1.0 + eta0.abs().max(eta1.abs()));
    if !(eta1 >= eta0 - slack) {
        return Err(TvoError::NonMonotone { eta0, eta1 });
    }
    Ok((eta0, eta1))
}

fn is_flat(eta0: f64, eta1: f64) -> bool {
    eta1 - eta0 <= 1e-14 * (1.0 + eta0.abs())
}

/// Forces strict monotonicity inside `(0, 1)` by nudging collisions apart.
fn enforce_strict(mut betas: Vec<f64>) -> Vec<f64> {
    let k = betas.len() - 1;
    for i in 1..k {
        let ceiling = 1.0 - NUDGE * (k - i) as f64;
        let floor = betas[i - 1] + NUDGE;
        betas[i] = betas[i].max(floor).min(ceiling);
    }
    betas
}

/// Moment-spacing schedule: `β_k` chosen so that `η(β_k)` are equally spaced
/// between `η(0)` and `η(1)`, each found by bisection.
pub fn moments_schedule<E: EtaEvaluator + ?Sized>(
    eval: &E,
    k: usize,
    opts: MomentsOptions,
) -> Result<MomentsOutcome> {
    if k == 0 {
        return Err(TvoError::InvalidSchedule("K must be at least 1".into()));
    }
    let (eta0, eta1) = endpoints(eval)?;
    let tol = match opts.tol {
        Tolerance::Relative(r) => r * (eta1 - eta0),
        Tolerance::Absolute(a) => a,
    };
    let targets: Vec<f64> = (0..=k)
        .map(|i| {
            let t = i as f64 / k as f64;
            (1.0 - t) * eta0 + t * eta1
        })
        .collect();
    if is_flat(eta0, eta1) {
        return Ok(MomentsOutcome {
            schedule: linear_schedule(k)?,
            converged: true,
            tol,
            targets,
        });
    }
    if !(tol > 0.0) {
        return Err(TvoError::InvalidSchedule(format!("tolerance must be positive, got {tol}")));
    }

    let mut betas = vec![0.0];
    let mut converged = true;
    let mut lo = 0.0;
    for &target in &targets[1..k] {
        let mut hi = 1.0;
        let mut found = None;
        let mut mid = 0.5 * (lo + hi);
        for _ in 0..opts.max_iter {
            mid = 0.5 * (lo + hi);
            let e = eval.eta(mid)?;
            if (e - target).abs() <= tol {
                found = Some(mid);
                break;
            }
            if e < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let beta = found.unwrap_or_else(|| {
            converged = false;
            mid
        });
        betas.push(beta);
        // targets increase, so the next root lies to the right
        lo = beta;
    }
    betas.push(1.0);
    Ok(MomentsOutcome {
        schedule: Schedule::new(enforce_strict(betas))?,
        converged,
        tol,
        targets,
    })
}

/// Largest-remainder apportionment of `total` seats by `shares`.
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = shares.iter().sum();
    let quotas: Vec<f64> = shares.iter().map(|s| s / sum * total as f64).collect();
    let mut seats: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = seats.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    // ties resolve to the lower index
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        seats[i] += 1;
    }
    seats
}

/// Per-knot-interval costs `√(Δβ · Δη)` over `J` equal-width intervals.
pub fn coarse_grained_costs<E: EtaEvaluator + ?Sized>(eval: &E, j: usize) -> Result<Vec<f64>> {
    let knots = linspace(0.0, 1.0, j + 1);
    let etas = knots.iter().map(|&b| eval.eta(b)).collect::<Result<Vec<_>>>()?;
    Ok(knots
        .windows(2)
        .zip(etas.windows(2))
        .map(|(b, e)| ((b[1] - b[0]) * (e[1] - e[0]).max(0.0)).sqrt())
        .collect())
}

/// Coarse-grained linear binning: the budget of `K` intervals is split over
/// `J` knot intervals in proportion to `√(Δβ · Δη)`, with linear spacing
/// inside each knot interval. Falls back to [`linear_schedule`] when every
/// cost vanishes.
pub fn coarse_grained_schedule<E: EtaEvaluator + ?Sized>(
    eval: &E,
    k: usize,
    j: usize,
) -> Result<Schedule> {
    if j == 0 || k < j {
        return Err(TvoError::InvalidSchedule(format!(
            "coarse-grained schedule needs K >= J >= 1, got K = {k}, J = {j}"
        )));
    }
    let (eta0, eta1) = endpoints(eval)?;
    if is_flat(eta0, eta1) {
        return linear_schedule(k);
    }
    let costs = coarse_grained_costs(eval, j)?;
    let total: f64 = costs.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return linear_schedule(k);
    }
    let budget = largest_remainder(&costs, k);
    let knots = linspace(0.0, 1.0, j + 1);
    let last_funded = budget.iter().rposition(|&n| n > 0).expect("K >= 1 seats");

    let mut betas = vec![0.0];
    let mut start = 0.0;
    for (idx, &n) in budget.iter().enumerate() {
        if n == 0 {
            continue;
        }
        // unfunded intervals are absorbed by their funded neighbours
        let end = if idx == last_funded { 1.0 } else { knots[idx + 1] };
        for i in 1..=n {
            betas.push(if i == n { end } else { start + (end - start) * i as f64 / n as f64 });
        }
        start = end;
    }
    Schedule::new(betas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::DiscreteLatentModel;
    use approx::assert_abs_diff_eq;

    fn two_state() -> DiscreteLatentModel {
        DiscreteLatentModel::new(&[0.5, 0.5], &[0.1, 0.3]).unwrap()
    }

    #[test]
    fn linear_reference_values() {
        assert_eq!(linear_schedule(1).unwrap().betas(), &[0.0, 1.0]);
        assert_eq!(linear_schedule(2).unwrap().betas(), &[0.0, 0.5, 1.0]);
        assert_eq!(linear_schedule(4).unwrap().betas(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(linear_schedule(0).is_err());
    }

    #[test]
    fn log_uniform_reference_values() {
        assert_eq!(log_uniform_schedule(2, 0.1).unwrap().betas(), &[0.0, 0.1, 1.0]);
        let s = log_uniform_schedule(3, 0.01).unwrap();
        for (a, b) in s.betas().iter().zip([0.0, 0.01, 0.1, 1.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let s = log_uniform_schedule(3, 0.25).unwrap();
        for (a, b) in s.betas().iter().zip([0.0, 0.25, 0.5, 1.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert!(log_uniform_schedule(3, 0.0).is_err());
        assert!(log_uniform_schedule(3, 1.0).is_err());
        assert!(log_uniform_schedule(1, 0.5).is_err());
    }

    #[test]
    fn moments_two_state_root() {
        let m = two_state();
        assert_eq!(
            moments_schedule(&ExactEta(&m), 1, MomentsOptions::default())
                .unwrap()
                .schedule
                .betas(),
            &[0.0, 1.0]
        );
        let out = moments_schedule(&ExactEta(&m), 2, MomentsOptions::default()).unwrap();
        assert!(out.converged);
        let expected = (5.0f64 / 3.0).ln() / 3f64.ln();
        assert_abs_diff_eq!(out.schedule.betas()[1], expected, epsilon = 1e-3);
        assert_abs_diff_eq!(expected, 0.4650, epsilon = 5e-5);
    }

    #[test]
    fn moments_images_are_equally_spaced() {
        let m = DiscreteLatentModel::new(&[0.2, 0.3, 0.5], &[0.05, 0.001, 0.02]).unwrap();
        let out = moments_schedule(&ExactEta(&m), 7, MomentsOptions::default()).unwrap();
        assert!(out.converged);
        for (beta, target) in out.schedule.betas().iter().zip(&out.targets) {
            assert!((m.eta(*beta).unwrap() - target).abs() <= out.tol);
        }
    }

    #[test]
    fn reference_threshold_is_selectable() {
        let out = moments_schedule(&ExactEta(&two_state()), 2, MomentsOptions::reference_threshold())
            .unwrap();
        assert_eq!(out.tol, 0.1);
        // a 0.1-nat band around the target is wide; the first midpoint is accepted
        assert_eq!(out.schedule.betas()[1], 0.5);
    }

    #[test]
    fn non_monotone_evaluator_is_rejected() {
        let bad = FnEta(|b: f64| Ok(-b));
        assert!(matches!(
            moments_schedule(&bad, 3, MomentsOptions::default()),
            Err(TvoError::NonMonotone { .. })
        ));
        assert!(matches!(
            coarse_grained_schedule(&bad, 4, 2),
            Err(TvoError::NonMonotone { .. })
        ));
    }

    #[test]
    fn exhausted_bisection_sets_warning_and_stays_strict() {
        let steep = FnEta(|b: f64| Ok(if b < 0.3 { 0.0 } else { 1.0 }));
        let out = moments_schedule(&steep, 4, MomentsOptions::default()).unwrap();
        assert!(!out.converged);
        let b = out.schedule.betas();
        assert!(b.windows(2).all(|w| w[1] > w[0]));
        assert!((b[1] - 0.3).abs() < 1e-6);
        assert!(b[2] > b[1] && b[2] - b[1] <= 2.0 * NUDGE);
    }

    #[test]
    fn coarse_grained_special_cases() {
        let flat = DiscreteLatentModel::with_exact_posterior(&[0.1, 0.2]).unwrap();
        assert_eq!(
            coarse_grained_schedule(&ExactEta(&flat), 6, 3).unwrap(),
            linear_schedule(6).unwrap()
        );
        let m = two_state();
        let one_bin = coarse_grained_schedule(&ExactEta(&m), 5, 1).unwrap();
        for (a, b) in one_bin.betas().iter().zip(linear_schedule(5).unwrap().betas()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
        }
        assert!(coarse_grained_schedule(&ExactEta(&m), 2, 3).is_err());
    }

    #[test]
    fn coarse_grained_favours_the_steeper_half() {
        let m = two_state();
        let costs = coarse_grained_costs(&ExactEta(&m), 2).unwrap();
        assert!(costs[0] > costs[1]);
        // K = 4 splits 2.07 : 1.93 and rounds to 2 : 2
        let s = coarse_grained_schedule(&ExactEta(&m), 4, 2).unwrap();
        let left = s.betas().iter().filter(|&&b| b < 0.5).count();
        let right = s.betas().iter().filter(|&&b| b > 0.5).count();
        assert!(left >= right);
        // a larger budget makes the asymmetry visible after rounding
        let s = coarse_grained_schedule(&ExactEta(&m), 30, 2).unwrap();
        let left = s.betas().iter().filter(|&&b| b < 0.5).count();
        let right = s.betas().iter().filter(|&&b| b > 0.5).count();
        assert!(left > right, "left {left} right {right}");
    }

    #[test]
    fn largest_remainder_sums_to_total() {
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 4), vec![2, 1, 1]);
        assert_eq!(largest_remainder(&[0.0, 5.0], 3), vec![0, 3]);
        assert_eq!(largest_remainder(&[2.07, 1.93], 4), vec![2, 2]);
    }

    #[test]
    fn unfunded_trailing_intervals_still_reach_one() {
        let eval = FnEta(|b: f64| Ok((20.0 * b).min(1.0)));
        let s = coarse_grained_schedule(&eval, 4, 4).unwrap();
        assert_eq!(s.betas().last(), Some(&1.0));
        assert_eq!(s.num_intervals(), 4);
    }

    #[test]
    fn schedule_validation_and_refinement() {
        assert!(Schedule::new(vec![0.0]).is_err());
        assert!(Schedule::new(vec![0.1, 1.0]).is_err());
        assert!(Schedule::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        let s = linear_schedule(2).unwrap();
        assert_eq!(s.refined(0.25).unwrap().betas(), &[0.0, 0.25, 0.5, 1.0]);
        assert!(s.refined(0.5).is_none());
        assert!(s.refined(1.0).is_none());
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, "[0.0,0.5,1.0]");
        let back: Schedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<Schedule>("[0.0, 0.7, 0.2, 1.0]").is_err());
    }
}
