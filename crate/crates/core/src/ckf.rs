//! Cubature Kalman filtering with a kernel-weighted measurement update.
//!
//! The update follows the regression route: the prediction and the
//! statistically linearized measurement are stacked into `d = W x + e`,
//! whitened by the Cholesky factors of `P(t|t-1)` and `R`, and the state is
//! found by a fixed-point iteration on the kernel-weighted normal equations.
//! The gain is assembled blockwise from the weight matrix and the posterior
//! covariance uses the Joseph form.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{adaptive_bandwidth, weight_matrices, KernelParams};

/// A vector-valued map used for state transition and measurement functions.
pub type VectorMap = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Mean and covariance of the filter belief.
#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl StateEstimate {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let est = StateEstimate { mean, cov };
        est.validate()?;
        Ok(est)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if n == 0 || self.cov.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "mean length {n} with covariance {:?}",
                self.cov.shape()
            )));
        }
        if self.mean.iter().chain(self.cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::ModelEvaluation("state estimate".into()));
        }
        let scale = self.cov.amax().max(f64::MIN_POSITIVE);
        let asym = (&self.cov - self.cov.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(Error::param(format!("covariance asymmetry {asym:.3e}")));
        }
        Ok(())
    }
}

/// State transition `f`, measurement map `h` and the noise covariances.
#[derive(Clone)]
pub struct SystemModel {
    pub f: VectorMap,
    pub h: VectorMap,
    pub q_cov: DMatrix<f64>,
    pub r_cov: DMatrix<f64>,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("q_cov", &self.q_cov)
            .field("r_cov", &self.r_cov)
            .finish_non_exhaustive()
    }
}

impl SystemModel {
    pub fn new(f: VectorMap, h: VectorMap, q_cov: DMatrix<f64>, r_cov: DMatrix<f64>) -> Self {
        SystemModel { f, h, q_cov, r_cov }
    }

    /// `x' = F x`, `y = H x`.
    pub fn linear(f: DMatrix<f64>, h: DMatrix<f64>, q_cov: DMatrix<f64>, r_cov: DMatrix<f64>) -> Self {
        let fm: VectorMap = Arc::new(move |x| &f * x);
        let hm: VectorMap = Arc::new(move |x| &h * x);
        SystemModel::new(fm, hm, q_cov, r_cov)
    }

    pub fn state_dim(&self) -> usize {
        self.q_cov.nrows()
    }

    pub fn meas_dim(&self) -> usize {
        self.r_cov.nrows()
    }
}

/// Lower-triangular factor with the diagonal jitter that was needed.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    pub l: DMatrix<f64>,
    pub jitter: f64,
}

const JITTER_LADDER: [f64; 5] = [1e-12, 1e-10, 1e-8, 1e-6, 1e-4];

fn try_cholesky(p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = p.nrows();
    let chol = nalgebra::Cholesky::new(p.clone())?;
    let l = chol.l();
    let max_diag = p.diagonal().amax();
    let floor = n as f64 * f64::EPSILON * max_diag;
    if l.diagonal().iter().all(|&v| v.is_finite() && v * v > floor) {
        Some(l)
    } else {
        None
    }
}

/// Cholesky factorization that adds the smallest diagonal jitter from a fixed
/// ladder (scaled by `trace(p) / n`) when `p` is not numerically positive
/// definite.
pub fn robust_cholesky(p: &DMatrix<f64>) -> Result<CholeskyFactor> {
    let n = p.nrows();
    if n == 0 || p.ncols() != n {
        return Err(Error::Dimension(format!("cholesky of {:?}", p.shape())));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::singular("non-finite matrix", p));
    }
    let sym = (p + p.transpose()) * 0.5;
    if let Some(l) = try_cholesky(&sym) {
        return Ok(CholeskyFactor { l, jitter: 0.0 });
    }
    let scale = sym.trace() / n as f64;
    if !(scale > 0.0) {
        return Err(Error::singular("cholesky: non-positive trace", p));
    }
    for step in JITTER_LADDER {
        let jitter = step * scale;
        let mut shifted = sym.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(l) = try_cholesky(&shifted) {
            return Ok(CholeskyFactor { l, jitter });
        }
    }
    Err(Error::singular("cholesky failed after maximum jitter", p))
}

fn lower_inverse(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    l.solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::singular("triangular inverse", l))
}

fn spd_inverse(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    match nalgebra::Cholesky::new(sym) {
        Some(c) => Ok(c.inverse()),
        None => m
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::singular(context.to_string(), m)),
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_finite(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::ModelEvaluation(what.to_string()))
    }
}

/// The `2n` cubature points `mean +/- sqrt(n) * S e_i`.
pub fn cubature_points(est: &StateEstimate) -> Result<Vec<DVector<f64>>> {
    est.validate()?;
    let n = est.dim();
    let factor = robust_cholesky(&est.cov)?;
    let scale = (n as f64).sqrt();
    let mut points = Vec::with_capacity(2 * n);
    for i in 0..n {
        points.push(&est.mean + factor.l.column(i) * scale);
    }
    for i in 0..n {
        points.push(&est.mean - factor.l.column(i) * scale);
    }
    Ok(points)
}

fn point_mean(points: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(points[0].len());
    for p in points {
        acc += p;
    }
    acc / points.len() as f64
}

/// Time update through the cubature rule.
pub fn predict(est: &StateEstimate, model: &SystemModel) -> Result<StateEstimate> {
    let n = est.dim();
    if model.q_cov.shape() != (n, n) {
        return Err(Error::Dimension(format!("Q is {:?} for state dim {n}", model.q_cov.shape())));
    }
    let propagated = cubature_points(est)?
        .iter()
        .map(|p| {
            let v = (model.f)(p);
            if v.len() != n {
                return Err(Error::Dimension(format!("f returned length {}", v.len())));
            }
            check_finite(&v, "state transition")?;
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = point_mean(&propagated);
    let mut cov = model.q_cov.clone();
    let w = 1.0 / propagated.len() as f64;
    for p in &propagated {
        let dev = p - &mean;
        cov.ger(w, &dev, &dev, 1.0);
    }
    Ok(StateEstimate {
        mean,
        cov: symmetrize(&cov),
    })
}

/// Predicted measurement and its second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMoments {
    pub y_pred: DVector<f64>,
    pub p_xy: DMatrix<f64>,
    /// Innovation covariance, including `R`.
    pub p_yy: DMatrix<f64>,
}

/// Propagates the predicted cubature points through `h`.
pub fn measurement_moments(pred: &StateEstimate, model: &SystemModel) -> Result<MeasurementMoments> {
    let m = model.meas_dim();
    let points = cubature_points(pred)?;
    let mapped = points
        .iter()
        .map(|p| {
            let v = (model.h)(p);
            if v.len() != m {
                return Err(Error::Dimension(format!("h returned length {}, R is {m}x{m}", v.len())));
            }
            check_finite(&v, "measurement function")?;
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    let y_pred = point_mean(&mapped);
    let n = pred.dim();
    let w = 1.0 / points.len() as f64;
    let mut p_xy = DMatrix::zeros(n, m);
    let mut p_yy = model.r_cov.clone();
    for (xp, yp) in points.iter().zip(&mapped) {
        let dx = xp - &pred.mean;
        let dy = yp - &y_pred;
        p_xy.ger(w, &dx, &dy, 1.0);
        p_yy.ger(w, &dy, &dy, 1.0);
    }
    Ok(MeasurementMoments {
        y_pred,
        p_xy,
        p_yy: symmetrize(&p_yy),
    })
}

/// Affine approximation `S = P_xy^T P_xx^{-1}` of the measurement map.
pub fn statistical_linearization(p_xx: &DMatrix<f64>, p_xy: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if p_xy.nrows() != p_xx.nrows() {
        return Err(Error::Dimension(format!(
            "P_xx {:?} vs P_xy {:?}",
            p_xx.shape(),
            p_xy.shape()
        )));
    }
    let chol = nalgebra::Cholesky::new(symmetrize(p_xx))
        .ok_or_else(|| Error::singular("statistical linearization", p_xx))?;
    Ok(chol.solve(p_xy).transpose())
}

/// Whitened linear regression `d = W x + e` for one measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionModel {
    pub d: DVector<f64>,
    pub w: DMatrix<f64>,
    /// Lower Cholesky factor of `P(t|t-1)`.
    pub xi_p: DMatrix<f64>,
    /// Lower Cholesky factor of the effective measurement covariance.
    pub xi_r: DMatrix<f64>,
    pub s_mat: DMatrix<f64>,
    pub y_pred: DVector<f64>,
    pub p_yy_diag: DVector<f64>,
    /// `y - y_pred`.
    pub innovation: DVector<f64>,
    pub r_eff: DMatrix<f64>,
}

impl RegressionModel {
    pub fn state_dim(&self) -> usize {
        self.xi_p.nrows()
    }

    pub fn meas_dim(&self) -> usize {
        self.xi_r.nrows()
    }

    /// The linearized measurement `y - y_pred + S x_pred` that the
    /// information form consumes.
    pub fn pseudo_measurement(&self, prior_mean: &DVector<f64>) -> DVector<f64> {
        &self.innovation + &self.s_mat * prior_mean
    }
}

/// Options for [`build_regression`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RegressionOptions {
    /// Add the cubature linearization residual `P_yy - R - S P S^T` to `R`.
    pub inflate_linearization_error: bool,
}

/// Stacks prediction and measurement into the whitened regression.
pub fn build_regression(
    pred: &StateEstimate,
    y: &DVector<f64>,
    moments: &MeasurementMoments,
    model: &SystemModel,
    options: RegressionOptions,
) -> Result<RegressionModel> {
    let n = pred.dim();
    let m = model.meas_dim();
    if y.len() != m || moments.y_pred.len() != m {
        return Err(Error::Dimension(format!("measurement length {} for m = {m}", y.len())));
    }
    check_finite(y, "measurement")?;
    let s_mat = statistical_linearization(&pred.cov, &moments.p_xy)?;

    let mut r_eff = model.r_cov.clone();
    if options.inflate_linearization_error {
        let residual = symmetrize(&(&moments.p_yy - &model.r_cov - &s_mat * &pred.cov * s_mat.transpose()));
        // keep only the PSD part of the residual
        let eig = residual.symmetric_eigen();
        let clipped = eig.eigenvalues.map(|v| v.max(0.0));
        r_eff += &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        r_eff = symmetrize(&r_eff);
    }

    let xi_p = robust_cholesky(&pred.cov)?.l;
    let xi_r = robust_cholesky(&r_eff)?.l;

    let innovation = y - &moments.y_pred;
    let lin_meas = &innovation + &s_mat * &pred.mean;

    let d_x = xi_p
        .solve_lower_triangular(&pred.mean)
        .ok_or_else(|| Error::singular("prior whitening", &xi_p))?;
    let d_y = xi_r
        .solve_lower_triangular(&lin_meas)
        .ok_or_else(|| Error::singular("measurement whitening", &xi_r))?;
    let w_x = lower_inverse(&xi_p)?;
    let w_y = xi_r
        .solve_lower_triangular(&s_mat)
        .ok_or_else(|| Error::singular("measurement whitening", &xi_r))?;

    let mut d = DVector::zeros(n + m);
    d.rows_mut(0, n).copy_from(&d_x);
    d.rows_mut(n, m).copy_from(&d_y);
    let mut w = DMatrix::zeros(n + m, n);
    w.view_mut((0, 0), (n, n)).copy_from(&w_x);
    w.view_mut((n, 0), (m, n)).copy_from(&w_y);

    Ok(RegressionModel {
        d,
        w,
        xi_p,
        xi_r,
        s_mat,
        y_pred: moments.y_pred.clone(),
        p_yy_diag: moments.p_yy.diagonal(),
        innovation,
        r_eff,
    })
}

/// Weight-matrix blocks mapped back to state and measurement coordinates.
struct WeightedBlocks {
    /// `Xi_p^{-T} Pi_xx Xi_p^{-1}`.
    p_hat: DMatrix<f64>,
    /// `Xi_p^{-T} Pi_(x,y) Xi_r^{-1}`, n x m.
    p_yx: DMatrix<f64>,
    /// `Xi_r^{-T} Pi_(y,x) Xi_p^{-1}`, m x n.
    p_xy: DMatrix<f64>,
    /// `Xi_r^{-T} Pi_yy Xi_r^{-1}`.
    r_hat: DMatrix<f64>,
}

fn weighted_blocks(reg: &RegressionModel, pi: &DMatrix<f64>) -> Result<WeightedBlocks> {
    let n = reg.state_dim();
    let m = reg.meas_dim();
    if pi.shape() != (n + m, n + m) {
        return Err(Error::Dimension(format!("Pi is {:?}, expected {}", pi.shape(), n + m)));
    }
    let xp_inv = lower_inverse(&reg.xi_p)?;
    let xr_inv = lower_inverse(&reg.xi_r)?;
    let pi_xx = pi.view((0, 0), (n, n));
    let pi_top_right = pi.view((0, n), (n, m));
    let pi_bottom_left = pi.view((n, 0), (m, n));
    let pi_yy = pi.view((n, n), (m, m));
    Ok(WeightedBlocks {
        p_hat: xp_inv.transpose() * pi_xx * &xp_inv,
        p_yx: xp_inv.transpose() * pi_top_right * &xr_inv,
        p_xy: xr_inv.transpose() * pi_bottom_left * &xp_inv,
        r_hat: xr_inv.transpose() * pi_yy * &xr_inv,
    })
}

/// Gain `[P^ + S^T P^_xy + P^_yx S + S^T R^ S]^{-1} [P^_yx + S^T R^]`.
pub fn gain_from_weights(reg: &RegressionModel, pi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let b = weighted_blocks(reg, pi)?;
    let s = &reg.s_mat;
    let st = s.transpose();
    let normal = &b.p_hat + &st * &b.p_xy + &b.p_yx * s + &st * &b.r_hat * s;
    let rhs = &b.p_yx + &st * &b.r_hat;
    let lu = normal.clone().lu();
    lu.solve(&rhs)
        .filter(|k| k.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::singular("weighted normal matrix", &normal))
}

/// The same gain via the matrix inversion lemma:
/// `P~^{-1} S~ [S P~^{-1} S~ + R^^{-1}]^{-1}` with `P~ = P^ + S^T P^_xy` and
/// `S~ = P^_yx R^^{-1} + S^T`.
pub fn gain_iml(reg: &RegressionModel, pi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let b = weighted_blocks(reg, pi)?;
    let s = &reg.s_mat;
    let r_hat_inv = b
        .r_hat
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::singular("weighted measurement block", &b.r_hat))?;
    let p_tilde = &b.p_hat + s.transpose() * &b.p_xy;
    let s_tilde = &b.p_yx * &r_hat_inv + s.transpose();
    let p_tilde_inv_s = p_tilde
        .clone()
        .lu()
        .solve(&s_tilde)
        .ok_or_else(|| Error::singular("P tilde", &p_tilde))?;
    let inner = s * &p_tilde_inv_s + &r_hat_inv;
    let inner_inv = inner
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::singular("inversion-lemma inner matrix", &inner))?;
    Ok(p_tilde_inv_s * inner_inv)
}

/// `(I - K S) P (I - K S)^T + K R K^T`, symmetrized.
pub fn joseph_update(
    prior_cov: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    s_mat: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = prior_cov.nrows();
    let a = DMatrix::identity(n, n) - gain * s_mat;
    symmetrize(&(&a * prior_cov * a.transpose() + gain * r * gain.transpose()))
}

/// How the measurement update weighs the regression rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    /// Ordinary least squares: the standard cubature Kalman update.
    Identity,
    /// Cauchy-kernel MEEF weights.
    Kernel(KernelParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateStatus {
    Converged,
    /// Iteration cap hit; the last iterate is returned.
    MaxIterations,
    /// Weighted normal matrix was singular; the prior is returned.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub posterior: StateEstimate,
    pub gain: DMatrix<f64>,
    pub iterations: usize,
    pub status: UpdateStatus,
    /// Final weight matrix `Pi` (identity for unweighted updates).
    pub pi: DMatrix<f64>,
    /// Factor applied to the kernel widths by the adaptive rule (1 when fixed).
    pub width_factor: f64,
    /// Kernel-weighted measurement covariance `Xi_r (Pi_yy / pi_xx)^{-1} Xi_r^T`
    /// used by the information-form fusion; `None` after a degenerate update.
    pub r_weighted: Option<DMatrix<f64>>,
}

/// Resolves the adaptive width factor from the innovation.
///
/// Each measurement channel gives a width `phi_i * ceiling`; the narrowest
/// one sets the factor applied to both kernel widths.
pub fn adaptive_width_factor(reg: &RegressionModel, params: &KernelParams, ceiling: Option<f64>) -> Result<f64> {
    if !params.adaptive {
        return Ok(1.0);
    }
    let top = ceiling
        .map(|c| c.clamp(params.sigma_min, params.sigma_max))
        .unwrap_or(params.sigma_max);
    let capped = KernelParams {
        sigma_max: top,
        sigma_min: params.sigma_min.min(top),
        ..*params
    };
    let mut narrowest = top;
    for (p, v) in reg.p_yy_diag.iter().zip(reg.innovation.iter()) {
        narrowest = narrowest.min(adaptive_bandwidth(*p, *v, &capped)?);
    }
    Ok(narrowest / params.sigma_max)
}

/// Weight matrix `Pi` for the residuals `d - W x`.
pub fn weights_at(reg: &RegressionModel, x: &DVector<f64>, weighting: &Weighting) -> Result<DMatrix<f64>> {
    let rows = reg.d.len();
    match weighting {
        Weighting::Identity => Ok(DMatrix::identity(rows, rows)),
        Weighting::Kernel(p) => {
            let e = &reg.d - &reg.w * x;
            Ok(weight_matrices(e.as_slice(), p)?.pi)
        }
    }
}

/// Kernel-weighted measurement covariance `Xi_r (Pi_yy / pi_xx)^{-1} Xi_r^T`,
/// where `pi_xx` is the mean diagonal weight of the prior rows. `None` when
/// the weighted block is singular.
pub fn weighted_measurement_cov(reg: &RegressionModel, pi: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = reg.state_dim();
    let m = reg.meas_dim();
    let pi_xx_mean = pi.view((0, 0), (n, n)).diagonal().mean();
    if !(pi_xx_mean > 0.0) {
        return None;
    }
    let pi_yy = symmetrize(&pi.view((n, n), (m, m)).into_owned()) / pi_xx_mean;
    let inv = spd_inverse(&pi_yy, "weighted measurement block").ok()?;
    let r = symmetrize(&(&reg.xi_r * inv * reg.xi_r.transpose()));
    r.iter().all(|v| v.is_finite()).then_some(r)
}

/// Kernel-weighted measurement update by fixed-point iteration.
pub fn fixed_point_update(reg: &RegressionModel, pred: &StateEstimate, weighting: &Weighting) -> Result<UpdateOutcome> {
    fixed_point_update_with_ceiling(reg, pred, weighting, None)
}

/// As [`fixed_point_update`], with an optional tighter bandwidth ceiling for
/// the adaptive rule (clamped into `[sigma_min, sigma_max]`).
pub fn fixed_point_update_with_ceiling(
    reg: &RegressionModel,
    pred: &StateEstimate,
    weighting: &Weighting,
    ceiling: Option<f64>,
) -> Result<UpdateOutcome> {
    let n = reg.state_dim();
    let m = reg.meas_dim();
    if pred.dim() != n {
        return Err(Error::Dimension("regression and prediction disagree".into()));
    }
    let degenerate = |iterations| UpdateOutcome {
        posterior: pred.clone(),
        gain: DMatrix::zeros(n, m),
        iterations,
        status: UpdateStatus::Degenerate,
        pi: DMatrix::identity(n + m, n + m),
        width_factor: 1.0,
        r_weighted: None,
    };

    let params = match weighting {
        Weighting::Identity => {
            let pi = DMatrix::identity(n + m, n + m);
            let gain = match gain_from_weights(reg, &pi) {
                Ok(k) => k,
                Err(_) => return Ok(degenerate(1)),
            };
            let mean = &pred.mean + &gain * &reg.innovation;
            let cov = joseph_update(&pred.cov, &gain, &reg.s_mat, &reg.r_eff);
            return Ok(UpdateOutcome {
                posterior: StateEstimate { mean, cov },
                gain,
                iterations: 1,
                status: UpdateStatus::Converged,
                r_weighted: Some(reg.r_eff.clone()),
                pi,
                width_factor: 1.0,
            });
        }
        Weighting::Kernel(p) => p,
    };
    params.validate()?;
    let width_factor = adaptive_width_factor(reg, params, ceiling)?;
    let kernel = params.with_width_factor(width_factor);

    let mut x = pred.mean.clone();
    let mut status = UpdateStatus::MaxIterations;
    let mut iterations = 0;
    let mut gain = DMatrix::zeros(n, m);
    let mut pi = DMatrix::identity(n + m, n + m);
    for k in 1..=kernel.fp_max_iter {
        iterations = k;
        let e = &reg.d - &reg.w * &x;
        pi = weight_matrices(e.as_slice(), &kernel)?.pi;
        gain = match gain_from_weights(reg, &pi) {
            Ok(g) => g,
            Err(_) => return Ok(degenerate(k)),
        };
        let next = &pred.mean + &gain * &reg.innovation;
        let step = (&next - &x).norm();
        let base = x.norm();
        x = next;
        let rel = if base > 0.0 { step / base } else { step };
        if rel <= kernel.fp_tol {
            status = UpdateStatus::Converged;
            break;
        }
    }
    let cov = joseph_update(&pred.cov, &gain, &reg.s_mat, &reg.r_eff);
    Ok(UpdateOutcome {
        posterior: StateEstimate { mean: x, cov },
        r_weighted: weighted_measurement_cov(reg, &pi),
        gain,
        iterations,
        status,
        pi,
        width_factor,
    })
}

/// Information-form update `P = (P^-1 + S^T R^-1 S)^-1`,
/// `x = P (P^-1 x_pred + S^T R^-1 y)` where `y` is the linearized
/// measurement and `R` the (weighted) measurement covariance.
pub fn info_form_update(
    pred: &StateEstimate,
    s_mat: &DMatrix<f64>,
    r_yy_weighted: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<StateEstimate> {
    let (d, v) = local_statistics(s_mat, r_yy_weighted, y)?;
    fuse_information(pred, &d, &v)
}

/// Posterior from a prior and summed information statistics `D`, `V`.
pub fn fuse_information(pred: &StateEstimate, d: &DVector<f64>, v: &DMatrix<f64>) -> Result<StateEstimate> {
    let prior_info = spd_inverse(&pred.cov, "prior covariance")?;
    let info = symmetrize(&(&prior_info + v));
    let cov = spd_inverse(&info, "posterior information")?;
    let mean = &cov * (&prior_info * &pred.mean + d);
    let est = StateEstimate {
        mean,
        cov: symmetrize(&cov),
    };
    check_finite(&est.mean, "information update")?;
    Ok(est)
}

/// Per-node information contributions `D = S^T R^-1 y`, `V = S^T R^-1 S`.
pub fn local_statistics(
    s_mat: &DMatrix<f64>,
    r_yy_weighted: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = s_mat.nrows();
    if r_yy_weighted.shape() != (m, m) || y.len() != m {
        return Err(Error::Dimension(format!(
            "S {:?}, R {:?}, y {}",
            s_mat.shape(),
            r_yy_weighted.shape(),
            y.len()
        )));
    }
    if s_mat.iter().chain(r_yy_weighted.iter()).chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::param("non-finite local statistics input"));
    }
    let r_inv = spd_inverse(r_yy_weighted, "measurement covariance")?;
    let st_rinv = s_mat.transpose() * r_inv;
    let d = &st_rinv * y;
    let v = symmetrize(&(&st_rinv * s_mat));
    Ok((d, v))
}
