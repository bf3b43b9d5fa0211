use std::path::PathBuf;
use std::process::Command;

use tvo_cli::harness::{
    emit_integrand, run_schedule_study, run_verify, run_verify_with, train, write_integrand, ExperimentConfig,
    HarnessError, Init, Strategy, VerifyOptions, INTEGRAND_ROWS, STUDY_KS,
};
use tvo_core::numeric::linspace;
use tvo_core::snis::snis_eta_mean;
use tvo_core::LogWeightGrid;

fn model_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("models").join(name)
}

fn with_model(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        model_spec: Some(model_path(name)),
        ..Default::default()
    }
}

#[test]
fn default_battery_passes() {
    let report = run_verify(&ExperimentConfig::default()).unwrap();
    let failures: Vec<_> = report.failures().map(|c| c.name.clone()).collect();
    assert!(report.passed, "{failures:?}");
    assert_eq!(report.check("gap_identity_lower").unwrap().cases, 200 * 50 + 20 * 4);
}

#[test]
fn corrupted_eta_fails_named_identities() {
    let report = run_verify_with(&ExperimentConfig::default(), VerifyOptions { corrupt_eta: Some(1e-3) }).unwrap();
    assert!(!report.passed);
    let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    assert!(failed.contains(&"gap_identity_lower"), "{failed:?}");
    assert!(failed.contains(&"gap_identity_upper"));
    assert!(report.check("reinforce_vs_finite_diff").unwrap().passed);
}

#[test]
fn flat_model_residuals_vanish() {
    let report = run_verify(&with_model("flat.json")).unwrap();
    assert!(report.passed);
    assert_eq!(report.source, "model:discrete");
    for c in &report.checks {
        assert!(c.residual <= 1e-15, "{}: {}", c.name, c.residual);
    }
}

#[test]
fn gaussian_model_file_runs_gradient_checks() {
    let report = run_verify(&with_model("canonical.json")).unwrap();
    assert!(report.passed);
    assert!(report.check("doubly_reparam_vs_finite_diff").is_some());
}

#[test]
fn study_rows_and_refinement() {
    let rows = run_schedule_study(&with_model("two_state.json")).unwrap();
    assert_eq!(rows.len(), 4 * STUDY_KS.len());
    for strategy in Strategy::ALL {
        let gaps: Vec<_> = rows.iter().filter(|r| r.strategy == strategy).collect();
        assert_eq!(gaps.iter().map(|r| r.k).collect::<Vec<_>>(), STUDY_KS);
        for w in gaps.windows(2) {
            assert!(w[1].gap_lower < w[0].gap_lower, "{strategy:?}");
            assert!(w[1].gap_upper < w[0].gap_upper, "{strategy:?}");
        }
    }
}

/// `log p(x) - TVO_L` for `{0, β₁, 1}` on the two-state model, by hand.
fn two_state_gap(beta1: f64) -> f64 {
    let (q, p) = ([0.5f64, 0.5], [0.1f64, 0.3]);
    let eta = |b: f64| {
        let u: Vec<f64> = q.iter().zip(&p).map(|(q, p)| q * (p / q).powf(b)).collect();
        let z: f64 = u.iter().sum();
        u.iter().zip(q.iter().zip(&p)).map(|(u, (q, p))| u / z * (p / q).ln()).sum::<f64>()
    };
    0.4f64.ln() - (beta1 * eta(0.0) + (1.0 - beta1) * eta(beta1))
}

#[test]
fn two_state_study_matches_enumeration() {
    let rows = run_schedule_study(&with_model("two_state.json")).unwrap();
    let at = |s: Strategy| rows.iter().find(|r| r.strategy == s && r.k == 2).unwrap();
    let linear = at(Strategy::Linear);
    let moments = at(Strategy::Moments);
    assert!((linear.gap_lower - two_state_gap(0.5)).abs() < 1e-12);
    assert!((moments.gap_lower - two_state_gap(moments.betas[1])).abs() < 1e-12);
    // the gap-minimizing β₁ sits just below 0.5, so β₁ ≈ 0.465 is slightly worse
    assert!(moments.gap_lower > linear.gap_lower);
    assert!(moments.gap_lower - linear.gap_lower < 2e-4);
}

#[test]
fn flat_study_has_zero_gaps() {
    for r in run_schedule_study(&with_model("flat.json")).unwrap() {
        assert!(r.gap_lower.abs() < 1e-15 && r.gap_upper.abs() < 1e-15, "{r:?}");
    }
}

#[test]
fn integrand_from_exact_model() {
    let rows = emit_integrand(&with_model("two_state.json"), None).unwrap();
    assert_eq!(rows.len(), INTEGRAND_ROWS);
    let betas: Vec<f64> = rows.iter().map(|r| r.beta).collect();
    assert_eq!(betas, linspace(0.0, 1.0, INTEGRAND_ROWS));
    assert!(rows.windows(2).all(|w| w[0].eta <= w[1].eta));
    assert!((rows[0].eta + 1.0601).abs() < 5e-5);
    assert!((rows[200].eta + 0.7855).abs() < 5e-5);

    let flat = emit_integrand(&with_model("flat.json"), None).unwrap();
    assert!(flat.iter().all(|r| (r.eta - flat[0].eta).abs() < 1e-15 && r.var.abs() < 1e-15));
}

#[test]
fn integrand_from_log_weights() {
    let dir = tempfile::tempdir().unwrap();
    let grid = LogWeightGrid::from_rows(&[vec![0.0, -1.0], vec![2f64.ln(), 0.5], vec![-0.3, 0.2]]).unwrap();
    let path = dir.path().join("lw.csv");
    grid.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
    let config = ExperimentConfig {
        output_dir: dir.path().to_path_buf(),
        ..Default::default()
    };
    let rows = emit_integrand(&config, Some(&path)).unwrap();
    assert_eq!(rows.len(), INTEGRAND_ROWS);
    assert_eq!(rows[100].eta, snis_eta_mean(&grid, 0.5).unwrap());
    let written = write_integrand(&config, &rows).unwrap();
    let text = std::fs::read_to_string(written).unwrap();
    assert_eq!(text.lines().count(), INTEGRAND_ROWS + 1);
    assert_eq!(text.lines().next(), Some("beta,eta,var"));
}

#[test]
fn posterior_init_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        model_spec: Some(model_path("canonical.json")),
        init: Init::Posterior,
        epochs: 3,
        output_dir: dir.path().to_path_buf(),
        ..Default::default()
    };
    let log = train(&config).unwrap();
    let first = &log.rows()[0];
    assert!(first.grad_norm_phi < 1e-8, "{}", first.grad_norm_phi);
    assert!(first.kl_q_posterior.abs() < 1e-10);
    assert!((first.objective - first.log_px).abs() < 1e-10);
    assert!(log.final_kl < 1e-3);
}

#[test]
fn training_divergence_is_reported() {
    let config = ExperimentConfig {
        model_spec: Some(model_path("canonical.json")),
        learning_rate: 1e4,
        epochs: 50,
        ..Default::default()
    };
    match train(&config) {
        Err(HarnessError::Divergence { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn train_rejects_discrete_and_missing_models() {
    assert!(matches!(train(&with_model("two_state.json")), Err(HarnessError::WrongModelKind { .. })));
    assert!(matches!(train(&ExperimentConfig::default()), Err(HarnessError::MissingModel(_))));
    assert!(matches!(
        run_verify(&with_model("no_such_model.json")),
        Err(HarnessError::UnreadableModel { .. })
    ));
}

#[test]
fn binary_exit_codes_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_tvo");
    let out = Command::new(bin)
        .args(["verify", "--model-spec"])
        .arg(model_path("two_state.json"))
        .arg("--output-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);

    let out = Command::new(bin)
        .args(["verify", "--model-spec", "/nonexistent.json"])
        .arg("--output-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(bin)
        .args(["schedule-study", "--schedule-strategy", "log-uniform", "--beta1", "0.05", "--model-spec"])
        .arg(model_path("two_state.json"))
        .arg("--output-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let study = std::fs::read_to_string(dir.path().join("study.csv")).unwrap();
    assert_eq!(study.lines().next(), Some("strategy,K,gap_lower,gap_upper"));
    assert_eq!(study.lines().count(), 21);

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"K": 0}"#).unwrap();
    let out = Command::new(bin).arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("K must be at least 1"));
}
