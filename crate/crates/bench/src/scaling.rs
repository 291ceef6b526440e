//! Per-step runtime against state dimension for the kernel-weighted update.

use std::time::Instant;

use dckf_core::ckf::{build_regression, fixed_point_update, measurement_moments, predict, RegressionOptions, StateEstimate, SystemModel, Weighting};
use dckf_core::kernel::KernelParams;
use dckf_core::noise::run_rng;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::BenchError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingPoint {
    pub n: usize,
    pub seconds_per_step: f64,
}

/// Chain of constant-velocity pairs with half the states measured.
fn model(n: usize) -> SystemModel {
    let mut f = DMatrix::identity(n, n);
    for i in (0..n.saturating_sub(1)).step_by(2) {
        f[(i, i + 1)] = 0.1;
    }
    let m = n.div_ceil(2);
    let h = DMatrix::from_fn(m, n, |r, c| if c == 2 * r { 1.0 } else { 0.0 });
    SystemModel::linear(f, h, DMatrix::identity(n, n) * 0.01, DMatrix::identity(m, m) * 0.1)
}

/// Median wall-clock time of one predict + kernel update at each dimension.
pub fn probe(dims: &[usize], steps: usize, repeats: usize) -> Result<Vec<ScalingPoint>, BenchError> {
    let mut out = Vec::with_capacity(dims.len());
    for &n in dims {
        if n == 0 {
            return Err(BenchError::Config("state dimension must be positive".into()));
        }
        let sys = model(n);
        // a fixed number of fixed-point passes keeps the work per step equal
        let kernel = KernelParams {
            fp_tol: f64::MIN_POSITIVE,
            fp_max_iter: 5,
            ..KernelParams::adaptive_meef(0.5, 5.0, 5.0)
        };
        let weighting = Weighting::Kernel(kernel);
        let mut samples = Vec::with_capacity(repeats);
        for rep in 0..repeats.max(1) {
            let mut rng = run_rng(17, rep as u64);
            let mut est = StateEstimate::new(DVector::zeros(n), DMatrix::identity(n, n))?;
            let mut truth = DVector::<f64>::zeros(n);
            let start = Instant::now();
            for _ in 0..steps.max(1) {
                truth = (sys.f)(&truth) + DVector::from_fn(n, |_, _| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
                let noise = DVector::from_fn(sys.meas_dim(), |_, _| 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
                let y = (sys.h)(&truth) + noise;
                let pred = predict(&est, &sys)?;
                let mm = measurement_moments(&pred, &sys)?;
                let reg = build_regression(&pred, &y, &mm, &sys, RegressionOptions::default())?;
                est = fixed_point_update(&reg, &pred, &weighting)?.posterior;
            }
            samples.push(start.elapsed().as_secs_f64() / steps.max(1) as f64);
        }
        samples.sort_by(f64::total_cmp);
        out.push(ScalingPoint {
            n,
            seconds_per_step: samples[samples.len() / 2],
        });
    }
    Ok(out)
}

/// Least-squares slope of `ln t` against `ln n`.
pub fn loglog_slope(points: &[ScalingPoint]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.seconds_per_step.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<_> = [4, 8, 16, 32]
            .iter()
            .map(|&n| ScalingPoint {
                n,
                seconds_per_step: 1e-6 * (n as f64).powi(3),
            })
            .collect();
        assert!((loglog_slope(&pts) - 3.0).abs() < 1e-12);
    }
}
