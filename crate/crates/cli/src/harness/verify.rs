//! Identity suite over a seeded battery of random models, or over one model file.

use std::io::Write;

use nalgebra::{dmatrix, dvector};
use serde::Serialize;
use tvo_core::battery;
use tvo_core::bounds::{
    asymptotic_rate_check, asymptotic_rate_limit, conjugate_psi_star, dual_divergence_check, etas_on,
    gap_decomposition_lower, gap_decomposition_upper, kl_variance_integral, renyi_objective, second_order_tvo,
    symm_kl_rectangle, tvo_lower, tvo_upper, KlDirection, QUADRATURE_POINTS,
};
use tvo_core::gradients::{
    doubly_reparam_coefficients, finite_diff_grad, lemma_checks, Atoms, EvaluatedAtoms, FdTarget, QUADRATURE_NODES,
};
use tvo_core::models::{ti_identity_check, MomentCurve};
use tvo_core::schedules::{linear_schedule, moments_schedule, ExactEta, MomentsOptions};
use tvo_core::{DiscreteLatentModel, ExactModel, LinearGaussianModel, PathFamily, PathMoments, Schedule, TestFunction};

use super::config::ExperimentConfig;
use super::error::Result;
use super::{ensure_output_dir, read_model};

pub const DISCRETE_MODELS: usize = 200;
pub const RANDOM_SCHEDULES: usize = 50;
pub const GAUSSIAN_MODELS: usize = 20;

const GAP_TOL: f64 = 1e-9;
const ENUM_TOL: f64 = 1e-10;
const CLOSED_FORM_TOL: f64 = 1e-8;
const INTEGRAL_TOL: f64 = 1e-6;
const GRADIENT_TOL: f64 = 1e-5;
const RATE_TOL: f64 = 0.02;
const REFERENCE_ROOT_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Worst residual over all cases.
    pub residual: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub source: String,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VerifyOptions {
    /// Shift added to every `η` value of the exact families under test.
    pub corrupt_eta: Option<f64>,
}

#[derive(Default)]
struct Checks(Vec<CheckResult>);

impl Checks {
    fn record(&mut self, name: &str, residual: f64, tolerance: f64) {
        let idx = match self.0.iter().position(|c| c.name == name) {
            Some(i) => i,
            None => {
                self.0.push(CheckResult {
                    name: name.to_string(),
                    residual: 0.0,
                    tolerance,
                    cases: 0,
                    passed: true,
                });
                self.0.len() - 1
            }
        };
        let c = &mut self.0[idx];
        c.cases += 1;
        if residual.is_nan() || residual > c.residual {
            c.residual = if c.residual.is_nan() { c.residual } else { residual };
        }
        c.passed &= residual <= tolerance;
    }
}

/// Family wrapper reporting a shifted `η`, used as a negative control.
struct ShiftedEta<'a, F> {
    inner: &'a F,
    shift: f64,
}

impl<F: PathFamily> PathFamily for ShiftedEta<'_, F> {
    fn moments(&self, beta: f64) -> tvo_core::Result<PathMoments> {
        let m = self.inner.moments(beta)?;
        Ok(PathMoments {
            eta: m.eta + self.shift,
            ..m
        })
    }
    fn log_px(&self) -> f64 {
        self.inner.log_px()
    }
    fn kl(&self, a: f64, b: f64) -> tvo_core::Result<f64> {
        self.inner.kl(a, b)
    }
    fn renyi_bound_direct(&self, alpha: f64) -> tvo_core::Result<f64> {
        self.inner.renyi_bound_direct(alpha)
    }
}

fn with_options<F: PathFamily>(
    family: &F,
    opts: VerifyOptions,
    body: &mut dyn FnMut(&dyn PathFamily) -> Result<()>,
) -> Result<()> {
    match opts.corrupt_eta {
        Some(shift) => body(&ShiftedEta { inner: family, shift }),
        None => body(family),
    }
}

fn bound_identities(f: &dyn PathFamily, schedules: &[Schedule], tol: f64, checks: &mut Checks) -> Result<()> {
    let log_px = f.log_px();
    for s in schedules {
        let etas = etas_on(f, s)?;
        let lo = tvo_lower(&etas, s)?;
        let up = tvo_upper(&etas, s)?;
        let (_, fwd) = gap_decomposition_lower(f, s)?;
        let (_, rev) = gap_decomposition_upper(f, s)?;
        checks.record("gap_identity_lower", (log_px - lo - fwd.iter().sum::<f64>()).abs(), tol.max(GAP_TOL));
        checks.record("gap_identity_upper", (up - log_px - rev.iter().sum::<f64>()).abs(), tol.max(GAP_TOL));
        checks.record("sandwich", (lo - log_px).max(log_px - up).max(0.0), 0.0);

        let widths = s.widths();
        let widest = (0..widths.len()).fold(0, |best, i| if widths[i] > widths[best] { i } else { best });
        let mid = 0.5 * (s.betas()[widest] + s.betas()[widest + 1]);
        if let Some(r) = s.refined(mid) {
            let e = etas_on(f, &r)?;
            let loosened = (lo - tvo_lower(&e, &r)?).max(tvo_upper(&e, &r)? - up).max(0.0);
            checks.record("refinement_monotone", loosened, 1e-12);
        }
        let second = second_order_tvo(f, s)?;
        checks.record("second_order_above_tvo_lower", (second.tvo_lower - second.value).max(0.0), 0.0);
    }
    Ok(())
}

fn duality_identities(f: &dyn PathFamily, tol: f64, checks: &mut Checks) -> Result<()> {
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    for &a in &grid {
        checks.record("conjugate_psi_star", (conjugate_psi_star(f, a)? - f.kl(a, 0.0)?).abs(), tol);
        checks.record("renyi_objective", (renyi_objective(f, a)? - f.renyi_bound_direct(1.0 - a)?).abs(), tol);
        for &b in &grid {
            checks.record("dual_divergence", dual_divergence_check(f, a, b)?, tol);
            let (lhs, rhs) = symm_kl_rectangle(f, a, b)?;
            checks.record("symm_kl_rectangle", (lhs - rhs).abs(), tol);
        }
    }
    for (a, b) in [(0.0, 1.0), (0.25, 0.75)] {
        let fwd = kl_variance_integral(f, a, b, KlDirection::Forward, QUADRATURE_POINTS)?;
        let rev = kl_variance_integral(f, a, b, KlDirection::Reverse, QUADRATURE_POINTS)?;
        checks.record("taylor_remainder_forward", (fwd - f.kl(a, b)?).abs(), INTEGRAL_TOL);
        checks.record("taylor_remainder_reverse", (rev - f.kl(b, a)?).abs(), INTEGRAL_TOL);
    }
    let curve = MomentCurve::uniform(f, QUADRATURE_POINTS)?;
    checks.record("thermodynamic_integration", ti_identity_check(&curve)?, INTEGRAL_TOL);
    Ok(())
}

fn moments_spacing(f: &dyn PathFamily, checks: &mut Checks) -> Result<()> {
    for k in [2, 5, 10] {
        let out = moments_schedule(&ExactEta(f), k, MomentsOptions::default())?;
        let mut excess: f64 = 0.0;
        for (b, t) in out.schedule.betas().iter().zip(&out.targets) {
            excess = excess.max((f.eta(*b)? - t).abs() - 2.0 * out.tol);
        }
        // distance beyond the allowed 2·tol band
        checks.record("moments_equal_spacing", excess.max(0.0), 1e-12);
    }
    Ok(())
}

fn asymptotic_rate(f: &dyn PathFamily, checks: &mut Checks) -> Result<()> {
    let limit = asymptotic_rate_limit(f)?;
    let rates = asymptotic_rate_check(f, &[8, 32, 128])?;
    let devs: Vec<f64> = rates.iter().map(|(_, r)| (r - limit).abs()).collect();
    let rel = if limit > 0.0 { devs[2] / limit } else { devs[2] };
    checks.record("asymptotic_rate_k128", rel, RATE_TOL);
    let growth = devs.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    checks.record("asymptotic_rate_monotone", growth, 0.0);
    Ok(())
}

fn gradient_identities(model: &LinearGaussianModel, x: &nalgebra::DVector<f64>, checks: &mut Checks) -> Result<()> {
    for beta in [0.1, 0.5, 0.9] {
        let eval = EvaluatedAtoms::new(model, x, &Atoms::adapted(model, x, beta, QUADRATURE_NODES)?)?;
        let fd = finite_diff_grad(model, x, beta, &FdTarget::Eta)?;
        checks.record(
            "reinforce_vs_finite_diff",
            eval.reinforce(beta, TestFunction::LogW)?.max_abs_diff(&fd),
            GRADIENT_TOL,
        );
        checks.record("doubly_reparam_vs_finite_diff", eval.doubly_reparam(beta)?.max_abs_diff(&fd), GRADIENT_TOL);
        let r = lemma_checks(model, x, beta, TestFunction::LogW)?;
        checks.record("reparam_lemma", r.lemma1, GRADIENT_TOL);
        checks.record("reparam_corollary", r.corollary1, GRADIENT_TOL);
        checks.record("partition_gradient_lemma", r.lemma2, GRADIENT_TOL);
    }
    let ends = doubly_reparam_coefficients(0.0).1.abs() + doubly_reparam_coefficients(1.0).1.abs();
    checks.record("covariance_coefficient_endpoints", ends, 0.0);
    Ok(())
}

fn battery_checks(config: &ExperimentConfig, opts: VerifyOptions, checks: &mut Checks) -> Result<()> {
    let models = battery::discrete_battery(config.seed, DISCRETE_MODELS)?;
    let schedules = battery::schedule_battery(config.seed.wrapping_add(1), RANDOM_SCHEDULES)?;
    for m in &models {
        with_options(m, opts, &mut |f| {
            bound_identities(f, &schedules, GAP_TOL, checks)?;
            duality_identities(f, ENUM_TOL, checks)?;
            moments_spacing(f, checks)
        })?;
    }

    let two_state = DiscreteLatentModel::new(&[0.5, 0.5], &[0.1, 0.3])?;
    with_options(&two_state, opts, &mut |f| {
        let out = moments_schedule(&ExactEta(f), 2, MomentsOptions::default())?;
        let root = (5.0f64 / 3.0).ln() / 3f64.ln();
        checks.record("moments_two_state_root", (out.schedule.betas()[1] - root).abs(), REFERENCE_ROOT_TOL);
        asymptotic_rate(f, checks)
    })?;

    // equal encoder and posterior covariance: log w is linear in z
    let base = LinearGaussianModel::new(dmatrix![1.0], dvector![0.0], 1.0, dvector![0.0], dvector![1.0])?;
    let x = dvector![1.0];
    let (_, cov) = base.posterior(&x);
    let shifted = base.with_encoder(dvector![-1.0], dvector![cov[(0, 0)].sqrt()])?.path(x)?;
    with_options(&shifted, opts, &mut |f| {
        let out = moments_schedule(&ExactEta(f), 5, MomentsOptions::default())?;
        let lin = linear_schedule(5)?;
        let dev = out
            .schedule
            .betas()
            .iter()
            .zip(lin.betas())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        // η is linear in β here, so an η tolerance maps to a β tolerance
        let beta_tol = out.tol / (f.eta(1.0)? - f.eta(0.0)?);
        checks.record("moments_equal_covariance_is_linear", dev, beta_tol);
        Ok(())
    })?;

    let gaussians = battery::gaussian_battery(config.seed.wrapping_add(2), GAUSSIAN_MODELS)?;
    let linear: Vec<Schedule> = [1, 2, 5, 16].iter().map(|&k| linear_schedule(k)).collect::<tvo_core::Result<_>>()?;
    for (model, x) in &gaussians {
        let path = model.path(x.clone())?;
        with_options(&path, opts, &mut |f| {
            bound_identities(f, &linear, CLOSED_FORM_TOL, checks)?;
            duality_identities(f, CLOSED_FORM_TOL, checks)?;
            asymptotic_rate(f, checks)
        })?;
        gradient_identities(model, x, checks)?;
    }
    Ok(())
}

fn model_checks(config: &ExperimentConfig, opts: VerifyOptions, checks: &mut Checks) -> Result<String> {
    let path = config.model_spec.as_ref().expect("model mode");
    let spec = read_model(path)?;
    let exact = spec.build()?;
    let tol = match exact {
        ExactModel::Discrete(_) => ENUM_TOL,
        ExactModel::Gaussian(_) => CLOSED_FORM_TOL,
    };
    let mut schedules: Vec<Schedule> = [1, 2, 5, 10, config.k]
        .iter()
        .map(|&k| linear_schedule(k))
        .collect::<tvo_core::Result<_>>()?;
    schedules.push(moments_schedule(&ExactEta(&exact), config.k, MomentsOptions::default())?.schedule);
    with_options(&exact, opts, &mut |f| {
        bound_identities(f, &schedules, tol, checks)?;
        duality_identities(f, tol, checks)?;
        moments_spacing(f, checks)
    })?;
    if let Some((model, x)) = spec.linear_gaussian()? {
        gradient_identities(&model, &x, checks)?;
    }
    Ok(format!("model:{}", exact.kind()))
}

pub fn run_verify(config: &ExperimentConfig) -> Result<VerifyReport> {
    run_verify_with(config, VerifyOptions::default())
}

/// Runs the identity suite. Without a model file the seeded battery is used.
pub fn run_verify_with(config: &ExperimentConfig, opts: VerifyOptions) -> Result<VerifyReport> {
    let mut checks = Checks::default();
    let source = if config.model_spec.is_some() {
        model_checks(config, opts, &mut checks)?
    } else {
        battery_checks(config, opts, &mut checks)?;
        "battery".to_string()
    };
    let passed = checks.0.iter().all(|c| c.passed);
    Ok(VerifyReport {
        seed: config.seed,
        source,
        passed,
        checks: checks.0,
    })
}

pub fn write_report(config: &ExperimentConfig, report: &VerifyReport) -> Result<std::path::PathBuf> {
    ensure_output_dir(config)?;
    let path = config.output_path("report.json");
    let mut file = std::fs::File::create(&path)?;
    serde_json::to_writer_pretty(&mut file, report)?;
    file.write_all(b"\n")?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks_keep_the_worst_residual() {
        let mut c = Checks::default();
        c.record("a", 1e-12, 1e-9);
        c.record("a", 1e-10, 1e-9);
        c.record("b", 2.0, 1.0);
        assert_eq!(c.0[0].residual, 1e-10);
        assert_eq!(c.0[0].cases, 2);
        assert!(c.0[0].passed);
        assert!(!c.0[1].passed);
        c.record("a", f64::NAN, 1e-9);
        assert!(c.0[0].residual.is_nan() && !c.0[0].passed);
    }
}
