//! The `grid-search` subcommand over decaying step sizes.

use std::io::Write;

use anyhow::Result;
use log::info;
use serde::{Deserialize, Serialize};
use tsg_core::driver::StepSchedule;

use crate::aggregate::mean_ci;
use crate::config::{ExperimentConfig, ReductionConfig};
use crate::experiment::execute;

/// Candidate values of each step constant.
pub const GRID: [f64; 3] = [0.1, 0.01, 0.001];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Mean over repetitions of the last recorded f1; NaN when a run aborted.
    pub final_f1: f64,
    pub ci_half: f64,
    pub failed_runs: usize,
}

/// Every combination of [`GRID`] for the levels the reduction optimizes; an
/// unused level keeps the config's value.
pub fn candidates(cfg: &ExperimentConfig) -> Vec<(f64, f64, f64)> {
    let (a0, _, g0) = match cfg.schedule() {
        StepSchedule::Decaying { alpha, beta, gamma } | StepSchedule::Constant { alpha, beta, gamma } => (alpha, beta, gamma),
        StepSchedule::TheoremConstant { .. } => (0.1, 0.1, 0.1),
    };
    let alphas: Vec<f64> = if cfg.run.reduction == ReductionConfig::WithoutUl { vec![a0] } else { GRID.to_vec() };
    let gammas: Vec<f64> = if cfg.run.reduction == ReductionConfig::WithoutLl { vec![g0] } else { GRID.to_vec() };
    let mut out = Vec::new();
    for &a in &alphas {
        for &b in &GRID {
            for &g in &gammas {
                out.push((a, b, g));
            }
        }
    }
    out
}

/// Runs the config at every candidate. Rows are sorted best first, failures last.
pub fn grid_search(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for (alpha, beta, gamma) in candidates(cfg) {
        let mut c = cfg.clone();
        c.schedule = Some(StepSchedule::Decaying { alpha, beta, gamma });
        let report = execute(&c, jobs)?;
        let failed_runs = report.failures().len();
        let finals: Vec<f64> = report.runs.iter().filter_map(|r| r.trace.last().map(|l| l.f1)).collect();
        let (final_f1, ci_half) = if failed_runs == 0 && finals.len() == report.runs.len() && finals.iter().all(|v| v.is_finite()) {
            mean_ci(&finals)
        } else {
            (f64::NAN, f64::NAN)
        };
        info!("grid ({alpha}, {beta}, {gamma}): final f1 {final_f1:e}, {failed_runs} failed runs");
        rows.push(GridRow { alpha, beta, gamma, final_f1, ci_half, failed_runs });
    }
    rows.sort_by(|a, b| a.final_f1.is_nan().cmp(&b.final_f1.is_nan()).then(a.final_f1.total_cmp(&b.final_f1)));
    Ok(rows)
}

pub fn print_table<W: Write>(mut out: W, rows: &[GridRow]) -> std::io::Result<()> {
    writeln!(out, "{:>7} {:>7} {:>7} {:>14} {:>11} {:>7}", "alpha", "beta", "gamma", "final_f1", "ci_half", "failed")?;
    for r in rows {
        writeln!(out, "{:>7} {:>7} {:>7} {:>14.6e} {:>11.3e} {:>7}", r.alpha, r.beta, r.gamma, r.final_f1, r.ci_half, r.failed_runs)?;
    }
    Ok(())
}
