//! Monte Carlo harness and error metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use dckf_core::network::{run_filter, simulate, TrajectoryRecord, Variant};
use dckf_core::noise::run_rng;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::scenario::{ResolvedScenario, ScenarioConfig};
use crate::BenchError;

/// Named groups of state indices scored together.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateGroup {
    pub name: String,
    pub indices: Vec<usize>,
}

/// Position/velocity for 4-state models, else one group per state.
pub fn default_groups(n: usize) -> Vec<StateGroup> {
    if n == 4 {
        vec![
            StateGroup {
                name: "position".into(),
                indices: vec![0, 1],
            },
            StateGroup {
                name: "velocity".into(),
                indices: vec![2, 3],
            },
        ]
    } else {
        (0..n)
            .map(|i| StateGroup {
                name: format!("x{i}"),
                indices: vec![i],
            })
            .collect()
    }
}

/// Per-step errors of one run for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct RunErrors {
    /// `||x_hat - x||^2` over the group.
    pub sq: Vec<f64>,
    /// Mean of `|x_hat_k - x_k|` over the group.
    pub abs: Vec<f64>,
}

pub fn run_errors(estimates: &[DVector<f64>], truth: &[DVector<f64>], group: &StateGroup) -> RunErrors {
    let mut sq = Vec::with_capacity(truth.len());
    let mut abs = Vec::with_capacity(truth.len());
    for (e, x) in estimates.iter().zip(truth) {
        let mut s = 0.0;
        let mut a = 0.0;
        for &k in &group.indices {
            let d = e[k] - x[k];
            s += d * d;
            a += d.abs();
        }
        sq.push(s);
        abs.push(a / group.indices.len() as f64);
    }
    RunErrors { sq, abs }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMetrics {
    pub group: String,
    pub rmse: Vec<f64>,
    pub mae: Vec<f64>,
    /// Time mean of `rmse`.
    pub armse: f64,
    /// Time mean of `mae`.
    pub mae_mean: f64,
    /// Standard error of the per-run time-averaged RMSE proxy
    /// (`sqrt(mean_t sq)` per run), for run-count sanity checks.
    pub armse_stderr: f64,
}

/// Aggregates runs: `RMSE(t) = sqrt(mean_runs sq)`, `MAE(t) = mean_runs abs`.
pub fn aggregate(group: &str, runs: &[&RunErrors]) -> GroupMetrics {
    let m = runs.len().max(1) as f64;
    let t_len = runs.first().map_or(0, |r| r.sq.len());
    let mut rmse = vec![0.0; t_len];
    let mut mae = vec![0.0; t_len];
    for r in runs {
        for t in 0..t_len {
            rmse[t] += r.sq[t];
            mae[t] += r.abs[t];
        }
    }
    for t in 0..t_len {
        rmse[t] = (rmse[t] / m).sqrt();
        mae[t] /= m;
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let per_run: Vec<f64> = runs.iter().map(|r| mean(&r.sq).sqrt()).collect();
    let pm = mean(&per_run);
    let var = if per_run.len() > 1 {
        per_run.iter().map(|v| (v - pm) * (v - pm)).sum::<f64>() / (per_run.len() - 1) as f64
    } else {
        0.0
    };
    GroupMetrics {
        group: group.to_string(),
        armse: mean(&rmse),
        mae_mean: mean(&mae),
        rmse,
        mae,
        armse_stderr: (var / per_run.len().max(1) as f64).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlgorithmReport {
    pub algorithm: Variant,
    pub groups: Vec<GroupMetrics>,
    pub completed_runs: usize,
    /// Run indices excluded because the estimate diverged.
    pub failed_runs: Vec<usize>,
    /// Fixed-point iteration count -> number of node updates.
    pub iteration_histogram: BTreeMap<usize, usize>,
    pub consensus_rounds_mean: f64,
    pub consensus_rounds_max: usize,
    pub consensus_unconverged_steps: usize,
    pub degenerate_updates: usize,
    /// Wall-clock seconds per filter step (whole network), informational.
    pub seconds_per_step: f64,
}

impl AlgorithmReport {
    pub fn group(&self, name: &str) -> Option<&GroupMetrics> {
        self.groups.iter().find(|g| g.group == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub master_seed: u64,
    pub mc_runs: usize,
    pub horizon: usize,
    pub report_node: usize,
    pub algorithms: Vec<AlgorithmReport>,
}

impl MetricsReport {
    pub fn algorithm(&self, v: Variant) -> Option<&AlgorithmReport> {
        self.algorithms.iter().find(|a| a.algorithm == v)
    }
}

struct RunResult {
    errors: Vec<Vec<RunErrors>>,
    diverged: Vec<bool>,
    records: Vec<RecordSummary>,
}

struct RecordSummary {
    iterations: Vec<usize>,
    rounds: Vec<usize>,
    unconverged: usize,
    degenerate: usize,
    seconds: f64,
}

fn summarize(rec: &TrajectoryRecord, seconds: f64) -> RecordSummary {
    let mut iterations = Vec::new();
    let mut rounds = Vec::new();
    let mut unconverged = 0;
    let mut degenerate = 0;
    for s in &rec.steps {
        rounds.push(s.consensus_rounds);
        unconverged += usize::from(!s.consensus_converged);
        for n in &s.nodes {
            iterations.push(n.iterations);
            degenerate += usize::from(n.failed);
        }
    }
    RecordSummary {
        iterations,
        rounds,
        unconverged,
        degenerate,
        seconds,
    }
}

/// Threshold on the estimation error beyond which a run counts as diverged.
const DIVERGENCE: f64 = 1e6;

fn one_run(cfg: &ScenarioConfig, sc: &ResolvedScenario, groups: &[StateGroup], run: usize) -> Result<RunResult, BenchError> {
    let mut rng = run_rng(cfg.master_seed, run as u64);
    let sim = simulate(&sc.process, &sc.sensors, &sc.noise, &sc.x0, cfg.horizon, &mut rng)?;
    let mut errors = Vec::new();
    let mut diverged = Vec::new();
    let mut records = Vec::new();
    for &variant in &cfg.algorithms {
        let mut nodes = sc.nodes(variant);
        let start = Instant::now();
        let rec = run_filter(&mut nodes, &sc.net, &sim, &sc.settings);
        let seconds = start.elapsed().as_secs_f64();
        let est: Vec<DVector<f64>> = rec.estimates.iter().map(|e| e[cfg.report_node].clone()).collect();
        let bad = est
            .iter()
            .zip(&sim.truth)
            .any(|(e, x)| e.iter().any(|v| !v.is_finite()) || (e - x).amax() > DIVERGENCE);
        diverged.push(bad);
        errors.push(groups.iter().map(|g| run_errors(&est, &sim.truth, g)).collect());
        records.push(summarize(&rec, seconds));
    }
    Ok(RunResult {
        errors,
        diverged,
        records,
    })
}

/// Runs `mc_runs` independent trajectories in parallel; every algorithm
/// filters the same simulated data within a run. Results are reduced in run
/// order, so the report depends only on the configuration.
pub fn monte_carlo(cfg: &ScenarioConfig) -> Result<MetricsReport, BenchError> {
    cfg.validate()?;
    let sc = cfg.resolve()?;
    let groups = default_groups(cfg.x0.len());
    let results: Vec<RunResult> = (0..cfg.mc_runs)
        .into_par_iter()
        .map(|r| one_run(cfg, &sc, &groups, r))
        .collect::<Result<_, _>>()?;

    let mut algorithms = Vec::new();
    for (a, &variant) in cfg.algorithms.iter().enumerate() {
        let failed_runs: Vec<usize> = (0..results.len()).filter(|&r| results[r].diverged[a]).collect();
        let kept: Vec<&RunResult> = results.iter().filter(|r| !r.diverged[a]).collect();
        let group_metrics = groups
            .iter()
            .enumerate()
            .map(|(g, grp)| {
                let runs: Vec<&RunErrors> = kept.iter().map(|r| &r.errors[a][g]).collect();
                aggregate(&grp.name, &runs)
            })
            .collect();
        let mut hist = BTreeMap::new();
        let mut rounds_total = 0usize;
        let mut rounds_count = 0usize;
        let mut rounds_max = 0;
        let mut unconverged = 0;
        let mut degenerate = 0;
        let mut seconds = 0.0;
        for r in &results {
            let s = &r.records[a];
            for &it in &s.iterations {
                *hist.entry(it).or_insert(0) += 1;
            }
            rounds_total += s.rounds.iter().sum::<usize>();
            rounds_count += s.rounds.len();
            rounds_max = rounds_max.max(s.rounds.iter().copied().max().unwrap_or(0));
            unconverged += s.unconverged;
            degenerate += s.degenerate;
            seconds += s.seconds;
        }
        algorithms.push(AlgorithmReport {
            algorithm: variant,
            groups: group_metrics,
            completed_runs: kept.len(),
            failed_runs,
            iteration_histogram: hist,
            consensus_rounds_mean: rounds_total as f64 / rounds_count.max(1) as f64,
            consensus_rounds_max: rounds_max,
            consensus_unconverged_steps: unconverged,
            degenerate_updates: degenerate,
            seconds_per_step: seconds / (results.len() * cfg.horizon).max(1) as f64,
        });
    }
    Ok(MetricsReport {
        scenario: cfg.name.clone(),
        master_seed: cfg.master_seed,
        mc_runs: cfg.mc_runs,
        horizon: cfg.horizon,
        report_node: cfg.report_node,
        algorithms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_estimates_score_zero() {
        let truth = vec![DVector::from_row_slice(&[1.0, 2.0]); 3];
        let g = StateGroup {
            name: "all".into(),
            indices: vec![0, 1],
        };
        let e = run_errors(&truth, &truth, &g);
        let m = aggregate("all", &[&e, &e]);
        assert!(m.rmse.iter().chain(&m.mae).all(|&v| v == 0.0));
        assert_eq!((m.armse, m.mae_mean), (0.0, 0.0));
    }

    #[test]
    fn two_runs_plus_minus_one() {
        let g = StateGroup {
            name: "x".into(),
            indices: vec![0],
        };
        let truth = vec![DVector::from_element(1, 0.0)];
        let a = run_errors(&[DVector::from_element(1, 1.0)], &truth, &g);
        let b = run_errors(&[DVector::from_element(1, -1.0)], &truth, &g);
        let m = aggregate("x", &[&a, &b]);
        assert_eq!(m.rmse, vec![1.0]);
        assert_eq!(m.mae, vec![1.0]);
    }

    #[test]
    fn armse_is_time_mean_and_mae_below_rmse() {
        let g = StateGroup {
            name: "p".into(),
            indices: vec![0, 1],
        };
        let truth: Vec<_> = (0..4).map(|t| DVector::from_row_slice(&[t as f64, 0.0])).collect();
        let runs: Vec<RunErrors> = (0..3)
            .map(|r| {
                let est: Vec<_> = truth
                    .iter()
                    .enumerate()
                    .map(|(t, x)| x + DVector::from_row_slice(&[0.1 * (r + t) as f64, -0.3 * r as f64]))
                    .collect();
                run_errors(&est, &truth, &g)
            })
            .collect();
        let m = aggregate("p", &runs.iter().collect::<Vec<_>>());
        let mean = m.rmse.iter().sum::<f64>() / 4.0;
        assert!((m.armse - mean).abs() <= 1e-12);
        for (mae, rmse) in m.mae.iter().zip(&m.rmse) {
            assert!(mae <= rmse);
        }
    }
}
