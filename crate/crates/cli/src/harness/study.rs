//! Exact gaps of every schedule strategy across a range of budgets.

use serde::Serialize;
use tvo_core::bounds::{gap_decomposition_lower, gap_decomposition_upper};
use tvo_core::schedules::ExactEta;

use super::config::{ExperimentConfig, Strategy};
use super::error::Result;
use super::{build_schedule, ensure_output_dir, fmt_float, load_model};

pub const STUDY_KS: [usize; 5] = [2, 5, 10, 30, 50];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyRow {
    pub strategy: Strategy,
    pub k: usize,
    pub gap_lower: f64,
    pub gap_upper: f64,
    pub betas: Vec<f64>,
}

pub fn run_schedule_study(config: &ExperimentConfig) -> Result<Vec<StudyRow>> {
    let model = load_model(config, "schedule-study")?.build()?;
    let eval = ExactEta(&model);
    let mut rows = Vec::new();
    for strategy in Strategy::ALL {
        for k in STUDY_KS {
            let s = build_schedule(strategy, &eval, k, config)?;
            let (gap_lower, _) = gap_decomposition_lower(&model, &s)?;
            let (gap_upper, _) = gap_decomposition_upper(&model, &s)?;
            rows.push(StudyRow {
                strategy,
                k,
                gap_lower,
                gap_upper,
                betas: s.betas().to_vec(),
            });
        }
    }
    Ok(rows)
}

pub fn write_study(config: &ExperimentConfig, rows: &[StudyRow]) -> Result<std::path::PathBuf> {
    ensure_output_dir(config)?;
    let path = config.output_path("study.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["strategy", "K", "gap_lower", "gap_upper"])?;
    for r in rows {
        w.write_record([
            r.strategy.name().to_string(),
            r.k.to_string(),
            fmt_float(r.gap_lower),
            fmt_float(r.gap_upper),
        ])?;
    }
    w.flush()?;
    Ok(path)
}
