//! Distributed filtering over a sensor network.
//!
//! Every sensor runs the kernel-weighted cubature update locally, condenses
//! it into information statistics `D_i = S_i^T R_i^-1 y_i` and
//! `V_i = S_i^T R_i^-1 S_i`, and injects them as a consensus leader. Each
//! sensor also runs a follower state; the converged follower average times
//! the sensor count gives the network sums `D`, `V`, and every node fuses
//! them with its own prediction in information form.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ckf::{
    adaptive_width_factor, build_regression, fixed_point_update, fuse_information, local_statistics,
    measurement_moments, predict, robust_cholesky, weighted_measurement_cov, weights_at, RegressionModel,
    RegressionOptions, StateEstimate, SystemModel, UpdateStatus, Weighting,
};
use crate::consensus::{build_weights, run_lfac, ConsensusNetwork, DiGraph};
use crate::error::{Error, Result};
use crate::kernel::{sigma_max_bound, KernelParams};
use crate::noise::NoiseSpec;

/// Filter family run at every node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "DCKF")]
    Dckf,
    #[serde(rename = "MCC-DCKF")]
    MccDckf,
    #[serde(rename = "MEE-DCKF")]
    MeeDckf,
    #[serde(rename = "MEEF-DCKF")]
    MeefDckf,
    #[serde(rename = "AMEEF-DCKF")]
    AmeefDckf,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::AmeefDckf,
        Variant::MeefDckf,
        Variant::MeeDckf,
        Variant::MccDckf,
        Variant::Dckf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dckf => "DCKF",
            Variant::MccDckf => "MCC-DCKF",
            Variant::MeeDckf => "MEE-DCKF",
            Variant::MeefDckf => "MEEF-DCKF",
            Variant::AmeefDckf => "AMEEF-DCKF",
        }
    }

    /// Weighting derived from a shared base kernel: MCC and MEE pin `eta`
    /// to 1 and 0, only AMEEF adapts the width.
    pub fn weighting(self, base: &KernelParams) -> Weighting {
        let fixed = KernelParams {
            adaptive: false,
            ..*base
        };
        match self {
            Variant::Dckf => Weighting::Identity,
            Variant::MccDckf => Weighting::Kernel(KernelParams { eta: 1.0, ..fixed }),
            Variant::MeeDckf => Weighting::Kernel(KernelParams { eta: 0.0, ..fixed }),
            Variant::MeefDckf => Weighting::Kernel(fixed),
            Variant::AmeefDckf => Weighting::Kernel(KernelParams {
                adaptive: true,
                ..*base
            }),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key || v.name().trim_end_matches("-DCKF") == key)
            .ok_or_else(|| Error::param(format!("unknown algorithm `{s}`")))
    }
}

/// Settings shared by all nodes of one filter run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSettings {
    pub kernel: KernelParams,
    /// Consensus stop tolerance.
    pub gamma: f64,
    /// Consensus round cap; `None` uses the network default.
    pub max_rounds: Option<usize>,
    /// Lower the adaptive bandwidth ceiling with the per-channel bound
    /// estimated from recent innovations.
    pub innovation_ceiling: bool,
    /// Innovations kept for that estimate.
    pub ceiling_window: usize,
    pub inflate_linearization_error: bool,
    pub fusion: FusionMode,
}

/// Where the kernel residuals are evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// At the network-fused estimate, with consensus inside the fixed-point
    /// loop.
    #[default]
    Network,
    /// At each node's local fixed point; one consensus per step.
    Local,
}

impl Default for FilterSettings {
    fn default() -> Self {
        FilterSettings {
            kernel: KernelParams::default(),
            gamma: 1e-6,
            max_rounds: None,
            innovation_ceiling: true,
            ceiling_window: 20,
            inflate_linearization_error: false,
            fusion: FusionMode::Network,
        }
    }
}

/// One sensor with its local model and belief.
#[derive(Debug, Clone)]
pub struct NodeRuntime {
    pub node_id: usize,
    pub model: SystemModel,
    pub estimate: StateEstimate,
    pub variant: Variant,
    pub weighting: Weighting,
    innovations: VecDeque<(DVector<f64>, DVector<f64>)>,
}

impl NodeRuntime {
    pub fn new(node_id: usize, model: SystemModel, estimate: StateEstimate, variant: Variant, kernel: &KernelParams) -> Self {
        NodeRuntime {
            node_id,
            model,
            estimate,
            variant,
            weighting: variant.weighting(kernel),
            innovations: VecDeque::new(),
        }
    }

    /// Bandwidth ceiling from the innovation history, if the bound is active
    /// on some channel.
    fn innovation_ceiling(&self, innovation: &DVector<f64>, p_yy_diag: &DVector<f64>) -> Option<f64> {
        if self.innovations.len() < 2 {
            return None;
        }
        let m = innovation.len();
        let k = self.innovations.len() as f64;
        let mut best: Option<f64> = None;
        for i in 0..m {
            let r = self.model.r_cov[(i, i)];
            // measurement-noise power seen by the innovations
            let r_tilde = self
                .innovations
                .iter()
                .map(|(v, p)| v[i] * v[i] - (p[i] - r))
                .sum::<f64>()
                / k;
            let norm_sq = innovation[i] * innovation[i] / r;
            if let Some(b) = sigma_max_bound(r_tilde, p_yy_diag[i], r, norm_sq) {
                best = Some(best.map_or(b, |c: f64| c.min(b)));
            }
        }
        best
    }
}

/// `[D | upper triangle of V]`, the vector agreed on by consensus.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionPacket {
    pub d: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl FusionPacket {
    pub fn stacked_len(n: usize) -> usize {
        n + n * (n + 1) / 2
    }

    pub fn stack(&self) -> DVector<f64> {
        let n = self.d.len();
        let mut out = Vec::with_capacity(Self::stacked_len(n));
        out.extend(self.d.iter());
        for i in 0..n {
            for j in i..n {
                out.push(self.v[(i, j)]);
            }
        }
        DVector::from_vec(out)
    }

    pub fn unstack(stacked: &[f64], n: usize) -> Result<Self> {
        if stacked.len() != Self::stacked_len(n) {
            return Err(Error::Dimension(format!(
                "stacked packet of length {} for n = {n}",
                stacked.len()
            )));
        }
        let d = DVector::from_column_slice(&stacked[..n]);
        let mut v = DMatrix::zeros(n, n);
        let mut k = n;
        for i in 0..n {
            for j in i..n {
                v[(i, j)] = stacked[k];
                v[(j, i)] = stacked[k];
                k += 1;
            }
        }
        Ok(FusionPacket { d, v })
    }
}

/// Sensor graph plus one stationary leader per sensor.
///
/// Sensors `0..n` are followers; leader `n + i` feeds sensor `i`.
pub fn sensor_network(n_sensors: usize, sensor_edges: &[(usize, usize)], alpha: f64) -> Result<ConsensusNetwork> {
    if n_sensors == 0 {
        return Err(Error::Topology("no sensors".into()));
    }
    let mut edges = sensor_edges.to_vec();
    if let Some(&(a, b)) = edges.iter().find(|&&(a, b)| a >= n_sensors || b >= n_sensors) {
        return Err(Error::Topology(format!("sensor edge {a} -> {b} outside 0..{n_sensors}")));
    }
    edges.extend((0..n_sensors).map(|i| (n_sensors + i, i)));
    let graph = DiGraph::new(2 * n_sensors, edges, (n_sensors..2 * n_sensors).collect())?;
    build_weights(&graph, alpha)
}

/// Bidirectional ring with chords to the node `n / 2` away.
pub fn ring_with_chords(n: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    if n < 2 {
        return edges;
    }
    for i in 0..n {
        edges.push((i, (i + 1) % n));
        edges.push(((i + 1) % n, i));
    }
    if n >= 4 {
        for i in 0..n {
            let j = (i + n / 2) % n;
            if !edges.contains(&(i, j)) {
                edges.push((i, j));
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeDiagnostics {
    pub iterations: usize,
    pub status: Option<UpdateStatus>,
    pub width_factor: f64,
    /// Local filter failed; the node contributed zero statistics.
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub consensus_rounds: usize,
    pub consensus_converged: bool,
    pub nodes: Vec<NodeDiagnostics>,
    /// Largest componentwise gap between `m * average` at any follower and
    /// the exact sum of the packets.
    pub fusion_error: f64,
}

struct LocalModel {
    pred: StateEstimate,
    reg: RegressionModel,
    weighting: Weighting,
    width_factor: f64,
}

fn local_model(
    node: &mut NodeRuntime,
    pred: &StateEstimate,
    y: &DVector<f64>,
    settings: &FilterSettings,
) -> Result<LocalModel> {
    let options = RegressionOptions {
        inflate_linearization_error: settings.inflate_linearization_error,
    };
    let moments = measurement_moments(pred, &node.model)?;
    let reg = build_regression(pred, y, &moments, &node.model, options)?;
    let (weighting, width_factor) = match node.weighting {
        Weighting::Kernel(p) if p.adaptive => {
            let ceiling = if settings.innovation_ceiling {
                node.innovation_ceiling(&reg.innovation, &reg.p_yy_diag)
            } else {
                None
            };
            let f = adaptive_width_factor(&reg, &p, ceiling)?;
            (Weighting::Kernel(p.with_width_factor(f)), f)
        }
        w => (w, 1.0),
    };
    if settings.ceiling_window > 0 {
        node.innovations.push_back((reg.innovation.clone(), reg.p_yy_diag.clone()));
        while node.innovations.len() > settings.ceiling_window {
            node.innovations.pop_front();
        }
    }
    Ok(LocalModel {
        pred: pred.clone(),
        reg,
        weighting,
        width_factor,
    })
}

/// Information statistics of one node with weights taken at `x`.
fn packet_at(local: &LocalModel, x: &DVector<f64>) -> Result<Option<FusionPacket>> {
    let pi = weights_at(&local.reg, x, &local.weighting)?;
    let Some(r_bar) = weighted_measurement_cov(&local.reg, &pi) else {
        return Ok(None);
    };
    let (d, v) = local_statistics(&local.reg.s_mat, &r_bar, &local.reg.pseudo_measurement(&local.pred.mean))?;
    Ok(Some(FusionPacket { d, v }))
}

/// One filter instant.
///
/// In [`FusionMode::Network`] the kernel weights of every node are evaluated
/// at the fused estimate: each fixed-point pass recomputes the residuals,
/// the weighted statistics, runs consensus and fuses, until the fused
/// estimate stops moving. [`FusionMode::Local`] weights each node at its own
/// local fixed point and fuses once.
pub fn distributed_step(
    nodes: &mut [NodeRuntime],
    net: &ConsensusNetwork,
    y_all: &[DVector<f64>],
    settings: &FilterSettings,
) -> Result<StepDiagnostics> {
    let n_nodes = nodes.len();
    if y_all.len() != n_nodes || net.n_followers() != n_nodes || net.n_leaders() != n_nodes {
        return Err(Error::Dimension(format!(
            "{} nodes, {} measurements, network with {} followers and {} leaders",
            n_nodes,
            y_all.len(),
            net.n_followers(),
            net.n_leaders()
        )));
    }
    let n = nodes[0].estimate.dim();

    let mut preds = Vec::with_capacity(n_nodes);
    let mut locals = Vec::with_capacity(n_nodes);
    for (node, y) in nodes.iter_mut().zip(y_all) {
        let pred = predict(&node.estimate, &node.model)?;
        locals.push(local_model(node, &pred, y, settings).ok());
        preds.push(pred);
    }
    let mut diags: Vec<NodeDiagnostics> = locals
        .iter()
        .map(|l| NodeDiagnostics {
            iterations: 0,
            status: None,
            width_factor: l.as_ref().map_or(1.0, |l| l.width_factor),
            failed: l.is_none(),
        })
        .collect();

    let kernel_passes = locals
        .iter()
        .flatten()
        .filter_map(|l| match l.weighting {
            Weighting::Kernel(p) => Some((p.fp_max_iter, p.fp_tol)),
            Weighting::Identity => None,
        })
        .fold(None, |acc: Option<(usize, f64)>, (it, tol)| {
            Some(acc.map_or((it, tol), |(a, t)| (a.max(it), t.min(tol))))
        });
    let (max_passes, tol) = match (settings.fusion, kernel_passes) {
        (FusionMode::Network, Some(p)) => p,
        _ => (1, f64::INFINITY),
    };

    // Local mode fixes each node's weights at its own fixed point.
    let mut local_points: Vec<Option<DVector<f64>>> = vec![None; n_nodes];
    if settings.fusion == FusionMode::Local {
        for (k, local) in locals.iter().enumerate() {
            let Some(l) = local else { continue };
            match fixed_point_update(&l.reg, &l.pred, &l.weighting) {
                Ok(out) if out.status != UpdateStatus::Degenerate => {
                    diags[k].iterations = out.iterations;
                    diags[k].status = Some(out.status);
                    local_points[k] = Some(out.posterior.mean);
                }
                Ok(out) => {
                    diags[k].iterations = out.iterations;
                    diags[k].status = Some(out.status);
                    diags[k].failed = true;
                }
                Err(_) => diags[k].failed = true,
            }
        }
    }

    let mut x: Vec<DVector<f64>> = preds.iter().map(|p| p.mean.clone()).collect();
    let mut fused: Vec<StateEstimate> = preds.clone();
    let max_rounds = settings.max_rounds.unwrap_or_else(|| net.max_rounds_default());
    let k_len = FusionPacket::stacked_len(n);
    let mut rounds = 0;
    let mut converged_all = true;
    let mut fusion_error: f64 = 0.0;
    let mut passes = 0;
    let mut settled = false;

    while passes < max_passes && !settled {
        passes += 1;
        let mut leader_values = DMatrix::zeros(n_nodes, k_len);
        let mut exact = DVector::zeros(k_len);
        for (k, local) in locals.iter().enumerate() {
            if diags[k].failed {
                continue;
            }
            let Some(l) = local else { continue };
            let at = local_points[k].as_ref().unwrap_or(&x[k]);
            match packet_at(l, at) {
                Ok(Some(p)) => {
                    let s = p.stack();
                    leader_values.row_mut(k).copy_from(&s.transpose());
                    exact += s;
                }
                Ok(None) | Err(_) => {
                    if settings.fusion == FusionMode::Network {
                        diags[k].status = Some(UpdateStatus::Degenerate);
                    }
                }
            }
        }
        let lfac = run_lfac(net, &leader_values, settings.gamma, max_rounds)?;
        rounds += lfac.rounds;
        converged_all &= lfac.converged;
        fusion_error = 0.0;
        let scale = n_nodes as f64;
        let mut step: f64 = 0.0;
        for (k, pred) in preds.iter().enumerate() {
            let sums: Vec<f64> = lfac.beta.row(k).iter().map(|b| b * scale).collect();
            if sums.iter().any(|v| !v.is_finite()) {
                // follower not reached: keep the local prediction
                fused[k] = pred.clone();
                fusion_error = f64::INFINITY;
                continue;
            }
            for (a, b) in sums.iter().zip(exact.iter()) {
                fusion_error = fusion_error.max((a - b).abs());
            }
            let packet = FusionPacket::unstack(&sums, n)?;
            fused[k] = fuse_information(pred, &packet.d, &packet.v).unwrap_or_else(|_| pred.clone());
            let base = x[k].norm();
            let delta = (&fused[k].mean - &x[k]).norm();
            step = step.max(if base > 0.0 { delta / base } else { delta });
            x[k] = fused[k].mean.clone();
        }
        settled = step <= tol;
    }

    if settings.fusion == FusionMode::Network {
        let status = if max_passes == 1 || settled {
            UpdateStatus::Converged
        } else {
            UpdateStatus::MaxIterations
        };
        for d in diags.iter_mut().filter(|d| !d.failed) {
            d.iterations = passes;
            if d.status.is_none() {
                d.status = Some(status);
            }
        }
    }
    for (node, est) in nodes.iter_mut().zip(fused) {
        node.estimate = est;
    }

    Ok(StepDiagnostics {
        consensus_rounds: rounds,
        consensus_converged: converged_all,
        nodes: diags,
        fusion_error,
    })
}

/// Truth and per-node measurements of one simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    /// `truth[t]` for `t = 1..=horizon` (index `t - 1`).
    pub truth: Vec<DVector<f64>>,
    /// `measurements[t][node]`.
    pub measurements: Vec<Vec<DVector<f64>>>,
}

/// Simulates `x(t) = f(x(t-1)) + q`, `y_i(t) = h_i(x(t)) + r_i` with Gaussian
/// process noise and per-node scalar noise laws applied channelwise.
pub fn simulate<R: Rng + ?Sized>(
    f: &SystemModel,
    sensors: &[SystemModel],
    noise: &[NoiseSpec],
    x0: &DVector<f64>,
    horizon: usize,
    rng: &mut R,
) -> Result<Simulation> {
    if horizon == 0 {
        return Err(Error::param("horizon must be at least 1"));
    }
    if noise.len() != sensors.len() {
        return Err(Error::Dimension(format!("{} noise specs for {} sensors", noise.len(), sensors.len())));
    }
    for spec in noise {
        spec.validate()?;
    }
    let n = x0.len();
    let q_factor = if f.q_cov.iter().all(|&v| v == 0.0) {
        DMatrix::zeros(n, n)
    } else {
        robust_cholesky(&f.q_cov)?.l
    };
    let mut x = x0.clone();
    let mut truth = Vec::with_capacity(horizon);
    let mut measurements = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
        x = (f.f)(&x) + &q_factor * z;
        let ys = sensors
            .iter()
            .zip(noise)
            .map(|(s, spec)| {
                let clean = (s.h)(&x);
                clean.map(|v| v + spec.draw(rng))
            })
            .collect();
        truth.push(x.clone());
        measurements.push(ys);
    }
    Ok(Simulation { truth, measurements })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub variant: Variant,
    /// `estimates[t][node]`.
    pub estimates: Vec<Vec<DVector<f64>>>,
    pub steps: Vec<StepDiagnostics>,
    /// Steps whose update raised an error; the nodes kept their predictions.
    pub failed_steps: Vec<(usize, String)>,
}

/// Runs the network filter over a simulated run. Step errors are recorded
/// and the trajectory continues from the predictions.
pub fn run_filter(
    nodes: &mut [NodeRuntime],
    net: &ConsensusNetwork,
    sim: &Simulation,
    settings: &FilterSettings,
) -> TrajectoryRecord {
    let variant = nodes.first().map_or(Variant::Dckf, |n| n.variant);
    let mut estimates = Vec::with_capacity(sim.truth.len());
    let mut steps = Vec::with_capacity(sim.truth.len());
    let mut failed_steps = Vec::new();
    for (t, ys) in sim.measurements.iter().enumerate() {
        match distributed_step(nodes, net, ys, settings) {
            Ok(d) => steps.push(d),
            Err(e) => {
                failed_steps.push((t + 1, e.to_string()));
                for node in nodes.iter_mut() {
                    if let Ok(p) = predict(&node.estimate, &node.model) {
                        node.estimate = p;
                    }
                }
            }
        }
        estimates.push(nodes.iter().map(|n| n.estimate.mean.clone()).collect());
    }
    TrajectoryRecord {
        variant,
        estimates,
        steps,
        failed_steps,
    }
}

/// Simulates one run and filters it.
pub fn run_trajectory<R: Rng + ?Sized>(
    nodes: &mut [NodeRuntime],
    net: &ConsensusNetwork,
    noise: &[NoiseSpec],
    x0: &DVector<f64>,
    horizon: usize,
    settings: &FilterSettings,
    rng: &mut R,
) -> Result<(Simulation, TrajectoryRecord)> {
    let first = nodes.first().ok_or_else(|| Error::param("no nodes"))?;
    let models: Vec<SystemModel> = nodes.iter().map(|n| n.model.clone()).collect();
    let sim = simulate(&first.model.clone(), &models, noise, x0, horizon, rng)?;
    let record = run_filter(nodes, net, &sim, settings);
    Ok((sim, record))
}
