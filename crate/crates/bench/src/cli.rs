//! `dckf-bench` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dckf_core::consensus::{build_weights, run_lfac_observed, DiGraph};
use dckf_core::network::Variant;
use nalgebra::DMatrix;

use crate::montecarlo::monte_carlo;
use crate::output::{check_file, prepare_dir, write_report};
use crate::scaling::{loglog_slope, probe};
use crate::scenario::{named_scenario, ScenarioConfig, SCENARIO_NAMES};
use crate::BenchError;

/// Environment variable naming the default output directory.
pub const OUTPUT_ENV: &str = "DCKF_BENCH_OUT";

#[derive(Debug, Parser)]
#[command(name = "dckf-bench", version, about = "Distributed cubature Kalman filter benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo comparison of filter variants on a scenario.
    Run(RunArgs),
    /// Push-Sum leader-follower consensus on a graph file.
    ConsensusDemo(ConsensusArgs),
    /// Grid over kernel width and mixture coefficient.
    Sweep(SweepArgs),
    /// Per-step runtime against state dimension.
    Scaling(ScalingArgs),
    /// Print a named scenario as TOML.
    ShowScenario {
        #[arg(long, default_value = "land_vehicle_s5")]
        scenario: String,
    },
}

#[derive(Debug, Args)]
pub struct ScenarioArgs {
    /// Scenario name or path to a TOML file.
    #[arg(long, default_value = "land_vehicle_s5")]
    pub scenario: String,
    /// Comma-separated algorithm list.
    #[arg(long, value_delimiter = ',')]
    pub algos: Option<Vec<Variant>>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory (default: $DCKF_BENCH_OUT, else ./results).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace existing result files.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct ConsensusArgs {
    /// Edge-list file (`src dst` lines and a `leaders:` line).
    #[arg(long)]
    pub graph: PathBuf,
    /// Leader values as `node:value` pairs.
    #[arg(long, value_delimiter = ',')]
    pub leaders: Vec<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 1e-6)]
    pub gamma: f64,
    #[arg(long)]
    pub max_rounds: Option<usize>,
    /// Trace CSV (`round,node,component,beta`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10")]
    pub sigmas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.5")]
    pub etas: Vec<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct ScalingArgs {
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

fn out_dir(args: &OutArgs) -> PathBuf {
    args.out
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"))
}

fn load_scenario(args: &ScenarioArgs) -> Result<ScenarioConfig, BenchError> {
    let algos = args.algos.clone().unwrap_or_else(|| Variant::ALL.to_vec());
    let mut cfg = if SCENARIO_NAMES.contains(&args.scenario.as_str()) || !Path::new(&args.scenario).exists() {
        named_scenario(&args.scenario, &algos)?
    } else {
        let mut c = ScenarioConfig::load(Path::new(&args.scenario))?;
        if args.algos.is_some() {
            c.algorithms = algos;
        }
        c
    };
    if let Some(r) = args.runs {
        cfg.mc_runs = r;
    }
    if let Some(h) = args.horizon {
        cfg.horizon = h;
    }
    if let Some(s) = args.seed {
        cfg.master_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &RunArgs) -> Result<(), BenchError> {
    let cfg = load_scenario(&args.scenario)?;
    let dir = cfg.output.clone().filter(|_| args.out.out.is_none()).unwrap_or_else(|| out_dir(&args.out));
    prepare_dir(&dir, &crate::output::RUN_FILES, args.out.overwrite)?;
    let report = monte_carlo(&cfg)?;
    write_report(&dir, &report, true)?;
    for a in &report.algorithms {
        let cells: Vec<String> = a
            .groups
            .iter()
            .map(|g| format!("{} ARMSE {:.4} MAE {:.4}", g.group, g.armse, g.mae_mean))
            .collect();
        println!("{:<11} {}  ({} runs)", a.algorithm.name(), cells.join("  "), a.completed_runs);
    }
    println!("results in {}", dir.display());
    Ok(())
}

fn parse_leaders(items: &[String]) -> Result<Vec<(usize, f64)>, BenchError> {
    items
        .iter()
        .map(|s| {
            let (node, value) = s
                .split_once(':')
                .ok_or_else(|| BenchError::Config(format!("leader value `{s}` is not `node:value`")))?;
            let node = node.trim().parse().map_err(|_| BenchError::Config(format!("bad node in `{s}`")))?;
            let value = value.trim().parse().map_err(|_| BenchError::Config(format!("bad value in `{s}`")))?;
            Ok((node, value))
        })
        .collect()
}

fn consensus_demo(args: &ConsensusArgs) -> Result<(), BenchError> {
    let text = fs::read_to_string(&args.graph).map_err(|e| BenchError::Io(format!("{}: {e}", args.graph.display())))?;
    let graph: DiGraph = text.parse()?;
    let pairs = parse_leaders(&args.leaders)?;
    let mut values = DMatrix::zeros(graph.leaders.len(), 1);
    for &l in &graph.leaders {
        if !pairs.iter().any(|&(n, _)| n == l) {
            return Err(BenchError::Config(format!("no value given for leader {l}")));
        }
    }
    for (node, value) in pairs {
        let k = graph
            .leaders
            .iter()
            .position(|&l| l == node)
            .ok_or_else(|| BenchError::Config(format!("node {node} is not a leader")))?;
        values[(k, 0)] = value;
    }
    let alpha = match args.alpha {
        Some(a) => a,
        None => {
            let probe = dckf_core::consensus::build_weights_unchecked(&graph, 1e-3)?;
            probe.bound.map_or(0.5, |b| 0.5 * b)
        }
    };
    let net = build_weights(&graph, alpha)?;
    let max_rounds = args.max_rounds.unwrap_or_else(|| net.max_rounds_default());

    let mut writer = match &args.trace {
        Some(p) => {
            check_file(p, args.overwrite)?;
            let mut w = csv::Writer::from_path(p).map_err(|e| BenchError::Io(e.to_string()))?;
            w.write_record(["round", "node", "component", "beta"])
                .map_err(|e| BenchError::Io(e.to_string()))?;
            Some(w)
        }
        None => None,
    };
    let mut write_err = None;
    let outcome = run_lfac_observed(&net, &values, args.gamma, max_rounds, |state| {
        let Some(w) = writer.as_mut() else { return };
        for (i, &node) in net.followers.iter().enumerate() {
            for c in 0..state.beta.ncols() {
                let b = state.beta[(i, c)];
                if let Err(e) = w.write_record([
                    state.round.to_string(),
                    node.to_string(),
                    c.to_string(),
                    b.to_string(),
                ]) {
                    write_err.get_or_insert(e.to_string());
                }
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(BenchError::Io(e));
    }
    if let Some(mut w) = writer {
        w.flush().map_err(|e| BenchError::Io(e.to_string()))?;
    }
    let mean = values.mean();
    println!(
        "alpha {alpha:.4}, {} rounds, converged: {}, leader mean {mean}",
        outcome.rounds, outcome.converged
    );
    for (i, &node) in net.followers.iter().enumerate() {
        println!("follower {node}: {}", outcome.beta[(i, 0)]);
    }
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<(), BenchError> {
    let base = load_scenario(&args.scenario)?;
    let dir = out_dir(&args.out);
    prepare_dir(&dir, &["sweep.csv"], args.out.overwrite)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| BenchError::Io(e.to_string());
    w.write_record(["sigma", "eta", "algorithm", "group", "armse", "mae"]).map_err(csv_err)?;
    for &sigma in &args.sigmas {
        for &eta in &args.etas {
            let mut cfg = base.clone();
            cfg.kernel.sigma1 = sigma;
            cfg.kernel.sigma2 = sigma;
            cfg.kernel.sigma_min = sigma * base.kernel.sigma_min / base.kernel.sigma_max;
            cfg.kernel.sigma_max = sigma;
            cfg.kernel.eta = eta;
            cfg.validate()?;
            let report = monte_carlo(&cfg)?;
            for a in &report.algorithms {
                for g in &a.groups {
                    w.write_record([
                        sigma.to_string(),
                        eta.to_string(),
                        a.algorithm.name().to_string(),
                        g.group.clone(),
                        g.armse.to_string(),
                        g.mae_mean.to_string(),
                    ])
                    .map_err(csv_err)?;
                    println!(
                        "sigma {sigma:<6} eta {eta:<4} {:<11} {:<9} ARMSE {:.4} MAE {:.4}",
                        a.algorithm.name(),
                        g.group,
                        g.armse,
                        g.mae_mean
                    );
                }
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| BenchError::Io(e.to_string()))?;
    fs::write(dir.join("sweep.csv"), bytes).map_err(|e| BenchError::Io(e.to_string()))?;
    Ok(())
}

fn scaling(args: &ScalingArgs) -> Result<(), BenchError> {
    let dir = out_dir(&args.out);
    prepare_dir(&dir, &["scaling.csv"], args.out.overwrite)?;
    let points = probe(&args.dims, args.steps, args.repeats)?;
    let mut text = String::from("n,seconds_per_step\n");
    for p in &points {
        text.push_str(&format!("{},{}\n", p.n, p.seconds_per_step));
        println!("n = {:<4} {:.3e} s/step", p.n, p.seconds_per_step);
    }
    fs::write(dir.join("scaling.csv"), text).map_err(|e| BenchError::Io(e.to_string()))?;
    if points.len() >= 2 {
        println!("log-log slope {:.3}", loglog_slope(&points));
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<(), BenchError> {
    match &cli.command {
        Command::Run(a) => run(a),
        Command::ConsensusDemo(a) => consensus_demo(a),
        Command::Sweep(a) => sweep(a),
        Command::Scaling(a) => scaling(a),
        Command::ShowScenario { scenario } => {
            print!("{}", named_scenario(scenario, &Variant::ALL)?.to_toml_string()?);
            Ok(())
        }
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
