use dckf_bench::montecarlo::{monte_carlo, MetricsReport};
use dckf_bench::scenario::{named_scenario, ScenarioConfig};
use dckf_core::network::Variant;

fn small(name: &str, runs: usize, horizon: usize) -> ScenarioConfig {
    let mut cfg = named_scenario(name, &[Variant::Dckf, Variant::AmeefDckf]).unwrap();
    cfg.mc_runs = runs;
    cfg.horizon = horizon;
    cfg
}

/// Everything except wall-clock timing.
fn strip_timing(mut r: MetricsReport) -> MetricsReport {
    for a in &mut r.algorithms {
        a.seconds_per_step = 0.0;
    }
    r
}

#[test]
fn same_seed_gives_the_same_report() {
    let cfg = small("land_vehicle_s4", 3, 30);
    let a = strip_timing(monte_carlo(&cfg).unwrap());
    let b = strip_timing(monte_carlo(&cfg).unwrap());
    assert_eq!(a, b);

    let mut other = cfg.clone();
    other.master_seed += 1;
    let c = strip_timing(monte_carlo(&other).unwrap());
    assert_ne!(a.algorithms[0].groups, c.algorithms[0].groups);
}

#[test]
fn metric_identities_hold() {
    let report = monte_carlo(&small("land_vehicle_s5", 4, 40)).unwrap();
    for a in &report.algorithms {
        assert_eq!(a.completed_runs, 4);
        for g in &a.groups {
            let mean = g.rmse.iter().sum::<f64>() / g.rmse.len() as f64;
            assert!((g.armse - mean).abs() <= 1e-12);
            for (r, m) in g.rmse.iter().zip(&g.mae) {
                assert!(*r >= 0.0 && *m >= 0.0);
                assert!(m <= &(r + 1e-12), "MAE {m} above RMSE {r}");
            }
        }
    }
}

#[test]
fn halving_the_run_count_stays_within_three_standard_errors() {
    let full = monte_carlo(&small("land_vehicle_gaussian", 16, 60)).unwrap();
    let half = monte_carlo(&small("land_vehicle_gaussian", 8, 60)).unwrap();
    for (a, b) in full.algorithms.iter().zip(&half.algorithms) {
        for (g, h) in a.groups.iter().zip(&b.groups) {
            let gap = (g.armse - h.armse).abs();
            assert!(gap < 3.0 * g.armse_stderr.max(h.armse_stderr), "{} {}: gap {gap}", a.algorithm, g.group);
        }
    }
}
