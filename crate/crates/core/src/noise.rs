//! Seeded measurement-noise generators: Gaussian, two-component mixed
//! Gaussian, Rayleigh, and general Gaussian mixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Scalar noise law. Variances, not standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    Gaussian {
        mean: f64,
        variance: f64,
    },
    /// Mean `mean`; variance `variance1` with probability `tau`, otherwise
    /// `variance2`.
    MixedGaussian {
        tau: f64,
        mean: f64,
        variance1: f64,
        variance2: f64,
    },
    /// Uncentered, strictly positive samples with scale `scale`.
    Rayleigh {
        scale: f64,
    },
    Mixture {
        components: Vec<MixtureComponent>,
    },
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::param(format!("{name} = {v} must be positive and finite")))
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("{name} = {v} must be finite")))
    }
}

impl NoiseSpec {
    pub fn gaussian(mean: f64, variance: f64) -> Self {
        NoiseSpec::Gaussian { mean, variance }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseSpec::Gaussian { mean, variance } => {
                finite("mean", *mean)?;
                positive("variance", *variance)
            }
            NoiseSpec::MixedGaussian {
                tau,
                mean,
                variance1,
                variance2,
            } => {
                if !(0.0..=1.0).contains(tau) {
                    return Err(Error::param(format!("tau = {tau} outside [0, 1]")));
                }
                finite("mean", *mean)?;
                positive("variance1", *variance1)?;
                positive("variance2", *variance2)
            }
            NoiseSpec::Rayleigh { scale } => positive("scale", *scale),
            NoiseSpec::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::param("mixture has no components"));
                }
                let mut total = 0.0;
                for c in components {
                    if !(c.weight.is_finite() && c.weight >= 0.0) {
                        return Err(Error::param(format!("mixture weight {} must be nonnegative", c.weight)));
                    }
                    finite("mixture mean", c.mean)?;
                    positive("mixture variance", c.variance)?;
                    total += c.weight;
                }
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::param(format!("mixture weights sum to {total}")));
                }
                Ok(())
            }
        }
    }

    /// Analytic mean and variance.
    pub fn moments(&self) -> (f64, f64) {
        match self {
            NoiseSpec::Gaussian { mean, variance } => (*mean, *variance),
            NoiseSpec::MixedGaussian {
                tau,
                mean,
                variance1,
                variance2,
            } => (*mean, tau * variance1 + (1.0 - tau) * variance2),
            NoiseSpec::Rayleigh { scale } => (
                scale * (std::f64::consts::PI / 2.0).sqrt(),
                (2.0 - std::f64::consts::PI / 2.0) * scale * scale,
            ),
            NoiseSpec::Mixture { components } => {
                let mean: f64 = components.iter().map(|c| c.weight * c.mean).sum();
                let second: f64 = components.iter().map(|c| c.weight * (c.variance + c.mean * c.mean)).sum();
                (mean, second - mean * mean)
            }
        }
    }

    /// One draw. The spec is assumed valid.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            NoiseSpec::Gaussian { mean, variance } => gauss(rng, *mean, *variance),
            NoiseSpec::MixedGaussian {
                tau,
                mean,
                variance1,
                variance2,
            } => {
                // no draw is spent when one branch is certain
                let first = match *tau {
                    t if t >= 1.0 => true,
                    t if t <= 0.0 => false,
                    t => rng.random::<f64>() < t,
                };
                gauss(rng, *mean, if first { *variance1 } else { *variance2 })
            }
            NoiseSpec::Rayleigh { scale } => {
                let u: f64 = rng.random();
                scale * (-2.0 * (1.0 - u).ln()).sqrt()
            }
            NoiseSpec::Mixture { components } => {
                let live: Vec<&MixtureComponent> = components.iter().filter(|c| c.weight > 0.0).collect();
                let chosen = if live.len() == 1 {
                    live[0]
                } else {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut pick = *live.last().expect("validated mixture");
                    for c in &live {
                        acc += c.weight;
                        if u < acc {
                            pick = c;
                            break;
                        }
                    }
                    pick
                };
                gauss(rng, chosen.mean, chosen.variance)
            }
        }
    }
}

fn gauss<R: Rng + ?Sized>(rng: &mut R, mean: f64, variance: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + variance.sqrt() * z
}

/// `count` independent draws from `spec`.
pub fn sample<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R, count: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::param("count must be at least 1"));
    }
    Ok((0..count).map(|_| spec.draw(rng)).collect())
}

/// Independent stream for one Monte Carlo run.
pub fn run_rng(master_seed: u64, run_index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(run_index);
    rng
}

pub const PRESETS: [&str; 4] = ["scenario4_bmG", "scenario5_mG", "rayleigh3", "rayleigh5"];

/// Named noise laws of the land-vehicle experiments.
///
/// `scenario4_bmG` is a reconstruction: a symmetric bimodal mixture with an
/// impulsive wide component; its exact parameterization is not established.
pub fn scenario_preset(name: &str) -> Result<NoiseSpec> {
    match name {
        "scenario5_mG" => Ok(NoiseSpec::MixedGaussian {
            tau: 0.6,
            mean: 0.2,
            variance1: 1e-4,
            variance2: 1e-2,
        }),
        "rayleigh3" => Ok(NoiseSpec::Rayleigh { scale: 3.0 }),
        "rayleigh5" => Ok(NoiseSpec::Rayleigh { scale: 5.0 }),
        "scenario4_bmG" => Ok(NoiseSpec::Mixture {
            components: vec![
                MixtureComponent {
                    weight: 0.4,
                    mean: 0.2,
                    variance: 1e-2,
                },
                MixtureComponent {
                    weight: 0.3,
                    mean: -0.2,
                    variance: 1e-2,
                },
                MixtureComponent {
                    weight: 0.3,
                    mean: 0.0,
                    variance: 20.0,
                },
            ],
        }),
        other => Err(Error::UnknownPreset(other.to_string())),
    }
}
