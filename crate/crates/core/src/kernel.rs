//! Cauchy-kernel weighting for the minimum-error-entropy-with-fiducial-points
//! (MEEF) cost.
//!
//! The cost over a set of whitened residuals `e` is
//!
//! ```text
//! J(e) = eta * sum_j C_s1(e_j) + (1 - eta) * sum_i sum_j C_s2(e_j - e_i)
//! ```
//!
//! with the Cauchy kernel `C_s(e) = 1 / (1 + e^2 / s)`. The first term is the
//! correntropy (MCC) anchor at zero error, the second is the pairwise error
//! entropy (MEE) term. `eta = 1` gives pure MCC weighting and `eta = 0` pure
//! MEE weighting.
//!
//! The fixed-point update consumes the weight matrix
//! `Theta = eta1 * Omega + eta2 * (Phi - Psi)`, where `Omega` holds the
//! fiducial kernels, `Psi` the pairwise kernels and `Phi` the row sums of
//! `Psi`. `Phi - Psi` is the Laplacian of the complete graph weighted by the
//! pairwise kernels, so `Theta` is symmetric positive semi-definite.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the fixed-point weight matrix `Pi` is formed from the kernel matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PiVariant {
    /// `Pi = Theta`, the matrix that solves the stationarity condition.
    #[default]
    Theta,
    /// `Pi = eta1 * Omega + eta2 * (Phi^T Phi + Psi^T Psi)`, the product form
    /// found in parts of the literature. Kept for comparison runs only.
    GramSum,
}

/// Kernel configuration for one filter variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelParams {
    /// Mixture coefficient between the fiducial (MCC) and pairwise (MEE) terms.
    pub eta: f64,
    /// Width of the fiducial-point kernel.
    pub sigma1: f64,
    /// Width of the pairwise kernel.
    pub sigma2: f64,
    /// Floor of the adaptive bandwidth.
    pub sigma_min: f64,
    /// Ceiling of the adaptive bandwidth.
    pub sigma_max: f64,
    pub adaptive: bool,
    /// Relative step tolerance of the fixed-point iteration.
    pub fp_tol: f64,
    pub fp_max_iter: usize,
    pub pi_variant: PiVariant,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            eta: 0.5,
            sigma1: 2.0,
            sigma2: 2.0,
            sigma_min: 2.0e-2,
            sigma_max: 2.0,
            adaptive: false,
            fp_tol: 1e-6,
            fp_max_iter: 20,
            pi_variant: PiVariant::Theta,
        }
    }
}

impl KernelParams {
    /// Pure correntropy weighting (`eta = 1`) with a fixed width.
    pub fn mcc(sigma: f64) -> Self {
        KernelParams {
            eta: 1.0,
            sigma1: sigma,
            sigma2: sigma,
            sigma_min: 1e-2 * sigma,
            sigma_max: sigma,
            ..Default::default()
        }
    }

    /// Pure error-entropy weighting (`eta = 0`) with a fixed width.
    pub fn mee(sigma: f64) -> Self {
        KernelParams {
            eta: 0.0,
            sigma1: sigma,
            sigma2: sigma,
            sigma_min: 1e-2 * sigma,
            sigma_max: sigma,
            ..Default::default()
        }
    }

    /// MEEF weighting with fixed widths.
    pub fn meef(eta: f64, sigma1: f64, sigma2: f64) -> Self {
        let sigma_max = sigma1.max(sigma2);
        KernelParams {
            eta,
            sigma1,
            sigma2,
            sigma_min: 1e-2 * sigma_max,
            sigma_max,
            ..Default::default()
        }
    }

    /// MEEF weighting whose widths shrink with the innovation size.
    /// `sigma1` and `sigma2` are the widths reached at the bandwidth ceiling.
    pub fn adaptive_meef(eta: f64, sigma1: f64, sigma2: f64) -> Self {
        KernelParams {
            adaptive: true,
            ..Self::meef(eta, sigma1, sigma2)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::param(format!("eta = {} outside [0, 1]", self.eta)));
        }
        for (name, v) in [
            ("sigma1", self.sigma1),
            ("sigma2", self.sigma2),
            ("sigma_min", self.sigma_min),
            ("sigma_max", self.sigma_max),
            ("fp_tol", self.fp_tol),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(format!("{name} = {v} must be positive and finite")));
            }
        }
        if self.sigma_min > self.sigma_max {
            return Err(Error::param(format!(
                "sigma_min = {} exceeds sigma_max = {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.fp_max_iter == 0 {
            return Err(Error::param("fp_max_iter must be at least 1"));
        }
        Ok(())
    }

    /// Weight of the fiducial term, `eta / sigma1^2`.
    pub fn eta1(&self) -> f64 {
        self.eta / (self.sigma1 * self.sigma1)
    }

    /// Weight of the pairwise term, `(1 - eta) / sigma2^2`.
    pub fn eta2(&self) -> f64 {
        (1.0 - self.eta) / (self.sigma2 * self.sigma2)
    }

    /// Copy with both kernel widths multiplied by `factor`.
    pub fn with_width_factor(&self, factor: f64) -> Self {
        KernelParams {
            sigma1: self.sigma1 * factor,
            sigma2: self.sigma2 * factor,
            ..*self
        }
    }
}

/// Kernel matrices for one set of residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrices {
    /// Diagonal of `Omega`: fiducial kernels `C_s1(e_i)`.
    pub omega: DVector<f64>,
    /// Diagonal of `Phi`: row sums of `Psi`.
    pub phi: DVector<f64>,
    /// Pairwise kernels `C_s2(e_j - e_i)`.
    pub psi: DMatrix<f64>,
    pub theta: DMatrix<f64>,
    pub pi: DMatrix<f64>,
    pub eta1: f64,
    pub eta2: f64,
}

impl WeightMatrices {
    pub fn omega_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.omega)
    }

    pub fn phi_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.phi)
    }
}

/// Cauchy kernel `1 / (1 + e^2 / sigma)`.
pub fn cauchy_kernel(e: f64, sigma: f64) -> Result<f64> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::param(format!("kernel width {sigma} must be positive")));
    }
    Ok(kernel_unchecked(e, sigma))
}

#[inline]
fn kernel_unchecked(e: f64, sigma: f64) -> f64 {
    1.0 / (1.0 + e * e / sigma)
}

/// MEEF cost of a residual vector.
pub fn meef_cost(errors: &[f64], params: &KernelParams) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::param("empty error vector"));
    }
    params.validate()?;
    let (s1, s2) = (params.sigma1, params.sigma2);
    let fiducial: f64 = errors.iter().map(|&e| kernel_unchecked(e, s1)).sum();
    let pairwise: f64 = errors
        .iter()
        .map(|&ei| errors.iter().map(|&ej| kernel_unchecked(ej - ei, s2)).sum::<f64>())
        .sum();
    Ok(params.eta * fiducial + (1.0 - params.eta) * pairwise)
}

/// Exact gradient of [`meef_cost`] with respect to each residual.
///
/// Note that the fixed-point weights in [`weight_matrices`] are iteratively
/// reweighted least-squares weights `C(e)`, not the derivative weights
/// `C(e)^2 / sigma` that appear here.
pub fn meef_gradient(errors: &[f64], params: &KernelParams) -> Result<DVector<f64>> {
    if errors.is_empty() {
        return Err(Error::param("empty error vector"));
    }
    params.validate()?;
    let (s1, s2, eta) = (params.sigma1, params.sigma2, params.eta);
    let grad = errors.iter().map(|&ek| {
        let c1 = kernel_unchecked(ek, s1);
        let fiducial = -2.0 * eta / s1 * c1 * c1 * ek;
        let pairwise: f64 = errors
            .iter()
            .map(|&ei| {
                let u = ek - ei;
                let c2 = kernel_unchecked(u, s2);
                c2 * c2 * u
            })
            .sum();
        fiducial - 4.0 * (1.0 - eta) / s2 * pairwise
    });
    Ok(DVector::from_iterator(errors.len(), grad))
}

/// Builds `Omega`, `Phi`, `Psi`, `Theta` and `Pi` for the given residuals.
///
/// Kernel widths are taken from `params` as-is; adaptive widths must already
/// be folded in by the caller.
pub fn weight_matrices(errors: &[f64], params: &KernelParams) -> Result<WeightMatrices> {
    if errors.is_empty() {
        return Err(Error::param("empty error vector"));
    }
    params.validate()?;
    let n = errors.len();
    let (s1, s2) = (params.sigma1, params.sigma2);
    let (eta1, eta2) = (params.eta1(), params.eta2());

    let omega = DVector::from_iterator(n, errors.iter().map(|&e| kernel_unchecked(e, s1)));
    let psi = DMatrix::from_fn(n, n, |i, j| kernel_unchecked(errors[j] - errors[i], s2));
    let phi = DVector::from_iterator(n, psi.row_iter().map(|r| r.sum()));

    let mut laplacian = -&psi;
    for i in 0..n {
        laplacian[(i, i)] += phi[i];
    }
    let mut theta = laplacian * eta2;
    for i in 0..n {
        theta[(i, i)] += eta1 * omega[i];
    }

    let pi = match params.pi_variant {
        PiVariant::Theta => theta.clone(),
        PiVariant::GramSum => {
            let phi_sq = DMatrix::from_diagonal(&phi.map(|v| v * v));
            let mut pi = (phi_sq + psi.transpose() * &psi) * eta2;
            for i in 0..n {
                pi[(i, i)] += eta1 * omega[i];
            }
            pi
        }
    };

    Ok(WeightMatrices {
        omega,
        phi,
        psi,
        theta,
        pi,
        eta1,
        eta2,
    })
}

/// Adaptive bandwidth from one innovation component.
///
/// `phi = 1 - exp(-P / innov^2)` is clamped to `[sigma_min / sigma_max, 1]`
/// and the returned width is `phi * sigma_max`. A zero innovation returns
/// `sigma_max`.
pub fn adaptive_bandwidth(p_yy_diag_i: f64, innovation_i: f64, params: &KernelParams) -> Result<f64> {
    if !p_yy_diag_i.is_finite() || !innovation_i.is_finite() {
        return Err(Error::param("non-finite input to adaptive bandwidth"));
    }
    if p_yy_diag_i <= 0.0 {
        return Err(Error::param(format!(
            "predicted innovation variance {p_yy_diag_i} must be positive"
        )));
    }
    if !(params.sigma_max > 0.0 && params.sigma_min > 0.0 && params.sigma_min <= params.sigma_max) {
        return Err(Error::param("bandwidth bounds must satisfy 0 < sigma_min <= sigma_max"));
    }
    let floor = params.sigma_min / params.sigma_max;
    let phi = if innovation_i == 0.0 {
        1.0
    } else {
        1.0 - (-p_yy_diag_i / (innovation_i * innovation_i)).exp()
    };
    Ok(phi.clamp(floor, 1.0) * params.sigma_max)
}

/// Upper bound on the Cauchy width under which the kernel filter beats the
/// minimum-mean-square-error filter for one measurement channel.
///
/// Returns `None` when the bound is vacuous (the denominator is not
/// positive), in which case the configured ceiling applies.
pub fn sigma_max_bound(r_tilde_i: f64, p_i: f64, r_i: f64, innovation_norm_sq: f64) -> Option<f64> {
    if !(r_i > 0.0) {
        return None;
    }
    let q = (r_tilde_i - (p_i - r_i)) / (2.0 * r_i) - 1.0;
    if q > 0.0 && q.is_finite() {
        Some(innovation_norm_sq.max(0.0) / q)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn kernel_examples() {
        assert_eq!(cauchy_kernel(0.0, 2.5).unwrap(), 1.0);
        assert_eq!(cauchy_kernel(1.0, 1.0).unwrap(), 0.5);
        assert_relative_eq!(cauchy_kernel(2.0, 2.0).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        assert!(cauchy_kernel(1.0, 0.0).is_err());
        assert!(cauchy_kernel(1.0, -1.0).is_err());
    }

    #[test]
    fn cost_examples() {
        let p = KernelParams::meef(0.5, 0.7, 3.0);
        assert_relative_eq!(meef_cost(&[0.0, 0.0], &p).unwrap(), 3.0, epsilon = 1e-15);
        let mcc = KernelParams::mcc(1.3);
        let e = 0.9;
        assert_relative_eq!(
            meef_cost(&[e], &mcc).unwrap(),
            cauchy_kernel(e, 1.3).unwrap(),
            epsilon = 1e-15
        );
        assert!(meef_cost(&[], &p).is_err());
    }

    #[test]
    fn gradient_matches_finite_difference_of_cost() {
        let p = KernelParams::meef(0.35, 0.8, 1.7);
        let errors = [0.3, -1.2, 2.5, 0.05, -0.4];
        let grad = meef_gradient(&errors, &p).unwrap();
        let h = 1e-5;
        // uniform shift of every residual
        let shifted = |c: f64| -> f64 {
            let e: Vec<f64> = errors.iter().map(|v| v + c).collect();
            meef_cost(&e, &p).unwrap()
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let analytic = grad.sum();
        assert_relative_eq!(fd, analytic, max_relative = 1e-6);
        // per-coordinate check
        for k in 0..errors.len() {
            let mut up = errors;
            let mut dn = errors;
            up[k] += h;
            dn[k] -= h;
            let fd_k = (meef_cost(&up, &p).unwrap() - meef_cost(&dn, &p).unwrap()) / (2.0 * h);
            assert_relative_eq!(fd_k, grad[k], max_relative = 1e-6, epsilon = 1e-9);
        }
    }

    #[test]
    fn weights_all_zero_errors() {
        let p = KernelParams {
            eta: 0.5,
            sigma1: 0.5_f64.sqrt(),
            sigma2: 0.5_f64.sqrt(),
            ..Default::default()
        };
        assert_relative_eq!(p.eta1(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(p.eta2(), 1.0, epsilon = 1e-14);
        let w = weight_matrices(&[0.0, 0.0], &p).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]);
        assert_relative_eq!(w.theta, expected, epsilon = 1e-14);
        assert_eq!(w.theta, w.pi);
    }

    #[test]
    fn single_sample_has_no_pairwise_term() {
        let p = KernelParams::meef(0.3, 1.1, 0.4);
        let e = 1.7;
        let w = weight_matrices(&[e], &p).unwrap();
        assert_relative_eq!(
            w.theta[(0, 0)],
            p.eta1() * cauchy_kernel(e, 1.1).unwrap(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn gram_sum_variant_differs_from_theta() {
        let p = KernelParams {
            pi_variant: PiVariant::GramSum,
            ..KernelParams::meef(0.4, 1.0, 1.0)
        };
        let w = weight_matrices(&[0.1, -0.3, 0.8], &p).unwrap();
        assert!((&w.pi - &w.theta).norm() > 1e-3);
        assert_relative_eq!(w.pi.clone(), w.pi.transpose(), epsilon = 1e-14);
    }

    /// Weighted least squares with `Theta` from the current residuals,
    /// iterated to a fixed point. Test-only oracle.
    fn solve_fixed_point(w: &DMatrix<f64>, d: &DVector<f64>, p: &KernelParams) -> DVector<f64> {
        let mut x = (w.transpose() * w).lu().solve(&(w.transpose() * d)).unwrap();
        for _ in 0..200 {
            let e = d - w * &x;
            let wm = weight_matrices(e.as_slice(), p).unwrap();
            let a = w.transpose() * &wm.theta * w;
            let b = w.transpose() * &wm.theta * d;
            let next = a.lu().solve(&b).unwrap();
            let step = (&next - &x).norm();
            x = next;
            if step <= 1e-14 * x.norm().max(1.0) {
                break;
            }
        }
        x
    }

    #[test]
    fn wide_mcc_kernel_reduces_to_least_squares() {
        let w = DMatrix::from_row_slice(
            5,
            3,
            &[
                1.0, 0.2, -0.3, 0.4, 1.1, 0.0, -0.5, 0.3, 0.9, 0.7, -0.8, 0.2, 0.1, 0.6, -1.2,
            ],
        );
        let d = DVector::from_row_slice(&[0.5, -1.0, 2.0, 0.3, 1.4]);
        let ols = (w.transpose() * &w).lu().solve(&(w.transpose() * &d)).unwrap();
        let x = solve_fixed_point(&w, &d, &KernelParams::mcc(1e16));
        assert_relative_eq!(x, ols, max_relative = 1e-7);
    }

    #[test]
    fn fixed_point_is_stationary() {
        let w = DMatrix::from_row_slice(
            6,
            2,
            &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5, -0.4, 1.0, 1.0, 0.3, 0.2, -0.7],
        );
        let d = DVector::from_row_slice(&[0.1, 0.2, 3.0, -0.1, 0.4, 0.05]);
        let p = KernelParams::meef(0.6, 1.5, 2.0);
        let x = solve_fixed_point(&w, &d, &p);
        let e = &d - &w * &x;
        let theta = weight_matrices(e.as_slice(), &p).unwrap().theta;
        let residual = w.transpose() * &theta * &d - w.transpose() * &theta * &w * &x;
        let scale = (w.transpose() * &theta * &d).norm();
        assert!(residual.norm() <= 1e-8 * scale, "residual {}", residual.norm());
    }

    #[test]
    fn adaptive_bandwidth_limits() {
        let p = KernelParams::adaptive_meef(0.5, 4.0, 4.0);
        assert_eq!(adaptive_bandwidth(1.0, 0.0, &p).unwrap(), p.sigma_max);
        assert_relative_eq!(
            adaptive_bandwidth(1.0, 1e-6, &p).unwrap(),
            p.sigma_max,
            max_relative = 1e-12
        );
        assert_relative_eq!(adaptive_bandwidth(1.0, 1e6, &p).unwrap(), p.sigma_min);
        let s = adaptive_bandwidth(2.25, 1.5, &p).unwrap();
        assert_relative_eq!(s, (1.0 - (-1.0_f64).exp()) * p.sigma_max, epsilon = 1e-14);
        assert_relative_eq!(s / p.sigma_max, 0.632_120_558_8, epsilon = 1e-10);
        assert!(adaptive_bandwidth(f64::NAN, 1.0, &p).is_err());
        assert!(adaptive_bandwidth(1.0, f64::INFINITY, &p).is_err());
    }

    #[test]
    fn sigma_max_bound_examples() {
        let r = 0.7;
        let b = sigma_max_bound(3.0 * r, r, r, 1.0).unwrap();
        assert_relative_eq!(b, 2.0, epsilon = 1e-14);
        assert_eq!(sigma_max_bound(r, r, r, 1.0), None);
        assert_eq!(sigma_max_bound(3.0 * r, r, r, 0.0), Some(0.0));
    }

    #[test]
    fn invalid_params_rejected() {
        let bad = [
            KernelParams { eta: 1.2, ..Default::default() },
            KernelParams { sigma1: 0.0, ..Default::default() },
            KernelParams { sigma_min: 5.0, sigma_max: 1.0, ..Default::default() },
            KernelParams { fp_max_iter: 0, ..Default::default() },
        ];
        for p in bad {
            assert!(p.validate().is_err(), "{p:?}");
            assert!(weight_matrices(&[0.1], &p).is_err());
        }
    }

    proptest! {
        #[test]
        fn kernel_is_even(e in -50.0..50.0f64, s in 1e-3..1e3f64) {
            prop_assert_eq!(cauchy_kernel(e, s).unwrap(), cauchy_kernel(-e, s).unwrap());
        }

        #[test]
        fn theta_is_symmetric_psd(
            errors in proptest::collection::vec(-10.0..10.0f64, 1..9),
            eta in 0.0..=1.0f64,
            s1 in 0.05..20.0f64,
            s2 in 0.05..20.0f64,
        ) {
            let p = KernelParams::meef(eta, s1, s2);
            let w = weight_matrices(&errors, &p).unwrap();
            let n = errors.len();
            prop_assert!((&w.theta - w.theta.transpose()).amax() <= 1e-12);
            prop_assert!((&w.psi - w.psi.transpose()).amax() <= 1e-15);
            for i in 0..n {
                prop_assert!((w.phi[i] - w.psi.row(i).sum()).abs() <= 1e-12);
                prop_assert!(w.omega[i] > 0.0 && w.omega[i] <= n as f64);
                for j in 0..n {
                    prop_assert!(w.psi[(i, j)] > 0.0 && w.psi[(i, j)] <= n as f64);
                }
            }
            let eig = w.theta.clone().symmetric_eigen().eigenvalues;
            let scale = w.theta.amax().max(1e-300);
            prop_assert!(eig.iter().all(|&l| l >= -1e-10 * scale));
        }

        #[test]
        fn adaptive_width_non_increasing_in_innovation(
            p in 1e-3..1e3f64,
            a in 0.0..100.0f64,
            b in 0.0..100.0f64,
        ) {
            let params = KernelParams::adaptive_meef(0.5, 3.0, 3.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let s_lo = adaptive_bandwidth(p, lo, &params).unwrap();
            let s_hi = adaptive_bandwidth(p, hi, &params).unwrap();
            prop_assert!(s_hi <= s_lo + 1e-15);
            prop_assert!(s_hi >= params.sigma_min - 1e-15 && s_lo <= params.sigma_max + 1e-15);
        }
    }
}
