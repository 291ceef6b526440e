//! Scenario configuration: model, initial belief, noise, algorithms and
//! consensus settings, loadable from TOML.

use std::path::{Path, PathBuf};

use dckf_core::ckf::{StateEstimate, SystemModel};
use dckf_core::consensus::{ConsensusNetwork, DiGraph};
use dckf_core::kernel::KernelParams;
use dckf_core::network::{ring_with_chords, sensor_network, FilterSettings, NodeRuntime, Variant};
use dckf_core::noise::{scenario_preset, NoiseSpec};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::BenchError;

/// One sensor: linear measurement matrix and nominal noise variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    /// Rows of `H`.
    pub h: Vec<Vec<f64>>,
    pub r_diag: Vec<f64>,
}

/// Per-node noise: a named preset or an explicit law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NoiseEntry {
    Preset(String),
    Spec(NoiseSpec),
}

impl NoiseEntry {
    pub fn resolve(&self) -> Result<NoiseSpec, BenchError> {
        match self {
            NoiseEntry::Preset(name) => Ok(scenario_preset(name)?),
            NoiseEntry::Spec(s) => {
                s.validate()?;
                Ok(s.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsensusConfig {
    /// Edge-list file over sensor indices; the leader line is ignored since
    /// every sensor injects its own statistics. `None` uses a ring with
    /// chords.
    pub topology: Option<PathBuf>,
    pub alpha: f64,
    pub gamma: f64,
    pub max_rounds: Option<usize>,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig {
            topology: None,
            alpha: 0.2,
            gamma: 1e-6,
            max_rounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Sampling interval (s); `f` is the constant-velocity matrix unless
    /// `f_matrix` is given.
    pub dt: f64,
    #[serde(default)]
    pub f_matrix: Option<Vec<Vec<f64>>>,
    pub q_diag: Vec<f64>,
    pub x0: Vec<f64>,
    pub x_hat0: Vec<f64>,
    pub p0_diag: Vec<f64>,
    pub horizon: usize,
    pub mc_runs: usize,
    pub master_seed: u64,
    pub sensors: Vec<SensorConfig>,
    pub noise: Vec<NoiseEntry>,
    pub algorithms: Vec<Variant>,
    #[serde(default)]
    pub kernel: KernelParams,
    #[serde(default = "default_ceiling")]
    pub innovation_ceiling: bool,
    #[serde(default)]
    pub consensus: ConsensusConfig,
    /// Node whose estimates are scored.
    #[serde(default = "default_report_node")]
    pub report_node: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_ceiling() -> bool {
    true
}

fn default_report_node() -> usize {
    4
}

/// Constant-velocity transition for `[north, east, v_north, v_east]`.
pub fn constant_velocity(dt: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(4, 4, &[
        1.0, 0.0, dt, 0.0, //
        0.0, 1.0, 0.0, dt, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    ])
}

/// Land-vehicle tracking with ten sensors; odd-numbered sensors (indices
/// 0, 2, ...) see position plus velocity, even-numbered ones position only.
pub fn land_vehicle_scenario(algorithms: &[Variant]) -> ScenarioConfig {
    let odd = vec![vec![-1.0, 0.0, -1.0, 0.0], vec![0.0, -1.0, 0.0, -1.0]];
    let even = vec![vec![-1.0, 0.0, 0.0, 0.0], vec![0.0, -1.0, 0.0, 0.0]];
    let sensors = (0..10)
        .map(|i| SensorConfig {
            h: if i % 2 == 0 { odd.clone() } else { even.clone() },
            r_diag: vec![1e-2, 1e-2],
        })
        .collect();
    ScenarioConfig {
        name: "land_vehicle".into(),
        dt: 0.3,
        f_matrix: None,
        q_diag: vec![0.01, 0.01, 1.0, 1.0],
        x0: vec![0.0, 0.0, 5.0, 5.0],
        x_hat0: vec![1.0; 4],
        p0_diag: vec![900.0, 900.0, 4.0, 4.0],
        horizon: 500,
        mc_runs: 200,
        master_seed: 2024,
        sensors,
        noise: vec![NoiseEntry::Spec(NoiseSpec::gaussian(0.0, 1e-2)); 10],
        algorithms: algorithms.to_vec(),
        // adaptive width never drops below a fifth of the ceiling
        kernel: KernelParams {
            sigma_min: 10.0,
            ..KernelParams::meef(0.5, 50.0, 50.0)
        },
        innovation_ceiling: true,
        consensus: ConsensusConfig::default(),
        report_node: 4,
        output: None,
    }
}

pub const SCENARIO_NAMES: [&str; 4] = [
    "land_vehicle_gaussian",
    "land_vehicle_s4",
    "land_vehicle_s5",
    "land_vehicle_rayleigh",
];

/// Named land-vehicle presets differing only in the measurement noise.
pub fn named_scenario(name: &str, algorithms: &[Variant]) -> Result<ScenarioConfig, BenchError> {
    let mut cfg = land_vehicle_scenario(algorithms);
    let (noise, r) = match name {
        "land_vehicle_gaussian" | "land_vehicle" => (NoiseEntry::Spec(NoiseSpec::gaussian(0.0, 1e-2)), 1e-2),
        // reconstructed bimodal law; see noise presets
        "land_vehicle_s4" => (NoiseEntry::Preset("scenario4_bmG".into()), 1e-2),
        "land_vehicle_s5" => (NoiseEntry::Preset("scenario5_mG".into()), 1e-4),
        "land_vehicle_rayleigh" => (NoiseEntry::Preset("rayleigh3".into()), 1.0),
        other => return Err(BenchError::Config(format!("unknown scenario `{other}`"))),
    };
    cfg.name = name.to_string();
    cfg.noise = vec![noise; cfg.sensors.len()];
    for s in &mut cfg.sensors {
        s.r_diag = vec![r; s.h.len()];
    }
    Ok(cfg)
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, BenchError> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 || rows.iter().any(|r| r.len() != nc) {
        return Err(BenchError::Config(format!("{what}: ragged or empty matrix")));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn diag(v: &[f64], what: &str) -> Result<DMatrix<f64>, BenchError> {
    if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(BenchError::Config(format!("{what}: variances must be finite and nonnegative")));
    }
    Ok(DMatrix::from_diagonal(&DVector::from_column_slice(v)))
}

/// Everything needed to filter one run, resolved from a config.
#[derive(Debug, Clone)]
pub struct ResolvedScenario {
    pub process: SystemModel,
    pub sensors: Vec<SystemModel>,
    pub noise: Vec<NoiseSpec>,
    pub x0: DVector<f64>,
    pub prior: StateEstimate,
    pub net: ConsensusNetwork,
    pub settings: FilterSettings,
}

impl ResolvedScenario {
    pub fn nodes(&self, variant: Variant) -> Vec<NodeRuntime> {
        self.sensors
            .iter()
            .enumerate()
            .map(|(i, m)| NodeRuntime::new(i, m.clone(), self.prior.clone(), variant, &self.settings.kernel))
            .collect()
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, BenchError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            BenchError::Config(msg) => BenchError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String, BenchError> {
        toml::to_string_pretty(self).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.mc_runs == 0 {
            return bad("mc_runs must be at least 1".into());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt = {} must be positive", self.dt));
        }
        let n = self.x0.len();
        if self.x_hat0.len() != n || self.p0_diag.len() != n || self.q_diag.len() != n {
            return bad("x0, x_hat0, p0_diag and q_diag must have equal length".into());
        }
        if self.sensors.is_empty() {
            return bad("at least one sensor is required".into());
        }
        if self.noise.len() != self.sensors.len() {
            return bad(format!(
                "{} noise entries for {} sensors",
                self.noise.len(),
                self.sensors.len()
            ));
        }
        if self.report_node >= self.sensors.len() {
            return bad(format!("report_node {} outside the sensor range", self.report_node));
        }
        if self.algorithms.is_empty() {
            return bad("no algorithms selected".into());
        }
        self.kernel.validate()?;
        self.resolve().map(|_| ())
    }

    pub fn transition(&self) -> Result<DMatrix<f64>, BenchError> {
        match &self.f_matrix {
            Some(rows) => matrix(rows, "f_matrix"),
            None if self.x0.len() == 4 => Ok(constant_velocity(self.dt)),
            None => Err(BenchError::Config("f_matrix is required unless the state has 4 entries".into())),
        }
    }

    pub fn resolve(&self) -> Result<ResolvedScenario, BenchError> {
        let n = self.x0.len();
        let f = self.transition()?;
        if f.shape() != (n, n) {
            return Err(BenchError::Config(format!("f_matrix is {:?}, state has {n} entries", f.shape())));
        }
        let q = diag(&self.q_diag, "q_diag")?;
        let sensors = self
            .sensors
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let h = matrix(&s.h, &format!("sensors[{i}].h"))?;
                if h.ncols() != n || s.r_diag.len() != h.nrows() {
                    return Err(BenchError::Config(format!("sensors[{i}]: H or r_diag has the wrong shape")));
                }
                if s.r_diag.iter().any(|&r| !(r > 0.0)) {
                    return Err(BenchError::Config(format!("sensors[{i}].r_diag must be positive")));
                }
                Ok(SystemModel::linear(f.clone(), h, q.clone(), diag(&s.r_diag, "r_diag")?))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let noise = self.noise.iter().map(NoiseEntry::resolve).collect::<Result<Vec<_>, _>>()?;
        let process = sensors[0].clone();
        let prior = StateEstimate::new(
            DVector::from_column_slice(&self.x_hat0),
            diag(&self.p0_diag, "p0_diag")?,
        )?;
        let edges = match &self.consensus.topology {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?;
                sensor_edges(&text)?
            }
            None => ring_with_chords(self.sensors.len()),
        };
        let net = sensor_network(self.sensors.len(), &edges, self.consensus.alpha)?;
        let settings = FilterSettings {
            kernel: self.kernel,
            gamma: self.consensus.gamma,
            max_rounds: self.consensus.max_rounds,
            innovation_ceiling: self.innovation_ceiling,
            ..FilterSettings::default()
        };
        Ok(ResolvedScenario {
            process,
            sensors,
            noise,
            x0: DVector::from_column_slice(&self.x0),
            prior,
            net,
            settings,
        })
    }
}

/// Sensor-to-sensor edges from an edge-list file. A `leaders:` line is
/// optional here.
pub fn sensor_edges(text: &str) -> Result<Vec<(usize, usize)>, BenchError> {
    let with_leaders = if text.lines().any(|l| l.trim_start().starts_with("leaders:")) {
        text.to_string()
    } else {
        format!("{text}\nleaders: 0\n")
    };
    let g: DiGraph = with_leaders.parse()?;
    Ok(g.edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn land_vehicle_parameters() {
        let cfg = land_vehicle_scenario(&[Variant::Dckf]);
        assert_eq!(cfg.dt, 0.3);
        assert_eq!(cfg.p0_diag, vec![900.0, 900.0, 4.0, 4.0]);
        assert_eq!(cfg.x0, vec![0.0, 0.0, 5.0, 5.0]);
        assert_eq!((cfg.horizon, cfg.mc_runs), (500, 200));
        let r = cfg.resolve().unwrap();
        // the second sensor
        let y = (r.sensors[1].h)(&DVector::from_row_slice(&[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(y, DVector::from_row_slice(&[-1.0, -2.0]));
        let y = (r.sensors[0].h)(&DVector::from_row_slice(&[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(y, DVector::from_row_slice(&[-4.0, -6.0]));
        let x = (r.process.f)(&DVector::from_row_slice(&[0.0, 0.0, 5.0, 5.0]));
        assert_eq!(x, DVector::from_row_slice(&[1.5, 1.5, 5.0, 5.0]));
    }

    #[test]
    fn toml_round_trip() {
        for name in SCENARIO_NAMES {
            let cfg = named_scenario(name, &Variant::ALL).unwrap();
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(ScenarioConfig::from_toml_str(&text).unwrap(), cfg);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = land_vehicle_scenario(&[Variant::Dckf]);
        cfg.noise.pop();
        assert!(cfg.validate().is_err());
        let mut cfg = land_vehicle_scenario(&[Variant::Dckf]);
        cfg.horizon = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = land_vehicle_scenario(&[Variant::Dckf]);
        cfg.sensors[3].h[1].pop();
        assert!(cfg.validate().is_err());
        assert!(ScenarioConfig::from_toml_str("name = 3").is_err());
        assert!(named_scenario("moon", &[]).is_err());
    }
}
