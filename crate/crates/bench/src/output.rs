//! CSV/JSON emission with overwrite protection.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::montecarlo::MetricsReport;
use crate::BenchError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> BenchError {
    BenchError::Io(format!("{}: {e}", path.display()))
}

/// Creates `dir` and checks that none of `files` exists in it unless
/// `overwrite` is set.
pub fn prepare_dir(dir: &Path, files: &[&str], overwrite: bool) -> Result<(), BenchError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    if !overwrite {
        for f in files {
            let p = dir.join(f);
            if p.exists() {
                return Err(BenchError::Exists(p.display().to_string()));
            }
        }
    }
    Ok(())
}

pub fn check_file(path: &Path, overwrite: bool) -> Result<(), BenchError> {
    if path.exists() && !overwrite {
        return Err(BenchError::Exists(path.display().to_string()));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    Ok(())
}

/// Per-step metrics: `step,algorithm,group,rmse,mae`.
pub fn metrics_csv(report: &MetricsReport) -> Result<Vec<u8>, BenchError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "algorithm", "group", "rmse", "mae"])
        .map_err(|e| BenchError::Io(e.to_string()))?;
    for a in &report.algorithms {
        for g in &a.groups {
            for (t, (r, m)) in g.rmse.iter().zip(&g.mae).enumerate() {
                w.write_record([
                    (t + 1).to_string(),
                    a.algorithm.name().to_string(),
                    g.group.clone(),
                    r.to_string(),
                    m.to_string(),
                ])
                .map_err(|e| BenchError::Io(e.to_string()))?;
            }
        }
    }
    w.into_inner().map_err(|e| BenchError::Io(e.to_string()))
}

#[derive(Debug, Serialize)]
struct GroupSummary<'a> {
    group: &'a str,
    armse: f64,
    mae: f64,
    armse_stderr: f64,
}

#[derive(Debug, Serialize)]
struct AlgorithmSummary<'a> {
    algorithm: &'a str,
    groups: Vec<GroupSummary<'a>>,
    completed_runs: usize,
    failed_runs: &'a [usize],
    iteration_histogram: &'a std::collections::BTreeMap<usize, usize>,
    consensus_rounds_mean: f64,
    consensus_rounds_max: usize,
    consensus_unconverged_steps: usize,
    degenerate_updates: usize,
    seconds_per_step: f64,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    scenario: &'a str,
    master_seed: u64,
    mc_runs: usize,
    horizon: usize,
    report_node: usize,
    algorithms: Vec<AlgorithmSummary<'a>>,
}

/// Scalar summary: ARMSE, time-mean MAE, diagnostics and seeds.
pub fn summary_json(report: &MetricsReport) -> Result<String, BenchError> {
    let s = Summary {
        scenario: &report.scenario,
        master_seed: report.master_seed,
        mc_runs: report.mc_runs,
        horizon: report.horizon,
        report_node: report.report_node,
        algorithms: report
            .algorithms
            .iter()
            .map(|a| AlgorithmSummary {
                algorithm: a.algorithm.name(),
                groups: a
                    .groups
                    .iter()
                    .map(|g| GroupSummary {
                        group: &g.group,
                        armse: g.armse,
                        mae: g.mae_mean,
                        armse_stderr: g.armse_stderr,
                    })
                    .collect(),
                completed_runs: a.completed_runs,
                failed_runs: &a.failed_runs,
                iteration_histogram: &a.iteration_histogram,
                consensus_rounds_mean: a.consensus_rounds_mean,
                consensus_rounds_max: a.consensus_rounds_max,
                consensus_unconverged_steps: a.consensus_unconverged_steps,
                degenerate_updates: a.degenerate_updates,
                seconds_per_step: a.seconds_per_step,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&s).map_err(|e| BenchError::Io(e.to_string()))
}

/// Two-column `step,value` series, one file per group, metric and algorithm.
pub fn plot_series(report: &MetricsReport) -> Vec<(PathBuf, String)> {
    let mut out = Vec::new();
    for a in &report.algorithms {
        for g in &a.groups {
            for (metric, values) in [("rmse", &g.rmse), ("mae", &g.mae)] {
                let mut text = format!("step,{metric}\n");
                for (t, v) in values.iter().enumerate() {
                    text.push_str(&format!("{},{v}\n", t + 1));
                }
                let name = format!("{}_{}_{}.csv", g.group, metric, a.algorithm.name());
                out.push((PathBuf::from("plot").join(name), text));
            }
        }
    }
    out
}

pub const RUN_FILES: [&str; 3] = ["metrics.csv", "summary.json", "plot"];

/// Writes `metrics.csv`, `summary.json` and `plot/*.csv` under `dir`.
pub fn write_report(dir: &Path, report: &MetricsReport, overwrite: bool) -> Result<(), BenchError> {
    prepare_dir(dir, &RUN_FILES, overwrite)?;
    let csv = metrics_csv(report)?;
    fs::write(dir.join("metrics.csv"), csv).map_err(|e| io_err(dir, e))?;
    fs::write(dir.join("summary.json"), summary_json(report)?).map_err(|e| io_err(dir, e))?;
    let plot = dir.join("plot");
    fs::create_dir_all(&plot).map_err(|e| io_err(&plot, e))?;
    for (rel, text) in plot_series(report) {
        let p = dir.join(rel);
        fs::write(&p, text).map_err(|e| io_err(&p, e))?;
    }
    Ok(())
}
