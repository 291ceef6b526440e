use dckf_core::ckf::{
    build_regression, fixed_point_update, gain_from_weights, gain_iml, info_form_update, joseph_update,
    measurement_moments, predict, weighted_measurement_cov, RegressionModel, RegressionOptions, StateEstimate,
    SystemModel, UpdateStatus, Weighting,
};
use dckf_core::kernel::{weight_matrices, KernelParams};
use dckf_core::noise::run_rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_spd(rng: &mut ChaCha20Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| normal(rng));
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * floor
}

fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

struct Instance {
    pred: StateEstimate,
    model: SystemModel,
    y: DVector<f64>,
    reg: RegressionModel,
}

fn random_linear_instance(rng: &mut ChaCha20Rng) -> Instance {
    let n = rng.random_range(2..=6);
    let m = rng.random_range(1..=4);
    let h = DMatrix::from_fn(m, n, |_, _| normal(rng));
    let model = SystemModel::linear(
        DMatrix::identity(n, n),
        h,
        random_spd(rng, n, 0.1),
        random_spd(rng, m, 0.1),
    );
    let pred = StateEstimate::new(DVector::from_fn(n, |_, _| normal(rng)), random_spd(rng, n, 0.2)).unwrap();
    let y = DVector::from_fn(m, |_, _| 3.0 * normal(rng));
    let mm = measurement_moments(&pred, &model).unwrap();
    let reg = build_regression(&pred, &y, &mm, &model, RegressionOptions::default()).unwrap();
    Instance { pred, model, y, reg }
}

#[test]
fn direct_and_inversion_lemma_gains_agree() {
    let mut rng = run_rng(101, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let inst = random_linear_instance(&mut rng);
        let eta = rng.random_range(0.0..=1.0);
        let sigma = rng.random_range(0.5..20.0);
        let params = KernelParams::meef(eta, sigma, sigma);
        let n = inst.reg.state_dim();
        let x = &inst.pred.mean + DVector::from_fn(n, |_, _| normal(&mut rng));
        let e = &inst.reg.d - &inst.reg.w * x;
        let pi = weight_matrices(e.as_slice(), &params).unwrap().pi;
        let direct = gain_from_weights(&inst.reg, &pi).unwrap();
        let iml = gain_iml(&inst.reg, &pi).unwrap();
        worst = worst.max(rel_err(&iml, &direct));
    }
    assert!(worst <= 1e-8, "worst relative gap {worst:e}");
}

#[test]
fn joseph_and_information_forms_agree_without_cross_weights() {
    let mut rng = run_rng(102, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let inst = random_linear_instance(&mut rng);
        let n = inst.reg.state_dim();
        let m = inst.reg.meas_dim();
        // cross blocks dropped and unit prior weights
        let mut pi = DMatrix::identity(n + m, n + m);
        for i in 0..m {
            pi[(n + i, n + i)] = rng.random_range(0.05..1.5);
        }
        let gain = gain_from_weights(&inst.reg, &pi).unwrap();
        let r_bar = weighted_measurement_cov(&inst.reg, &pi).unwrap();
        let mean = &inst.pred.mean + &gain * &inst.reg.innovation;
        let cov = joseph_update(&inst.pred.cov, &gain, &inst.reg.s_mat, &r_bar);

        let info = info_form_update(
            &inst.pred,
            &inst.reg.s_mat,
            &r_bar,
            &inst.reg.pseudo_measurement(&inst.pred.mean),
        )
        .unwrap();
        worst = worst
            .max(rel_err(&DMatrix::from_column_slice(n, 1, info.mean.as_slice()), &DMatrix::from_column_slice(n, 1, mean.as_slice())))
            .max(rel_err(&info.cov, &cov));
    }
    assert!(worst <= 1e-8, "worst relative gap {worst:e}");
}

/// Textbook Kalman update on the linear model.
fn kalman(pred: &StateEstimate, h: &DMatrix<f64>, r: &DMatrix<f64>, y: &DVector<f64>) -> StateEstimate {
    let s = h * &pred.cov * h.transpose() + r;
    let k = &pred.cov * h.transpose() * s.try_inverse().unwrap();
    let n = pred.dim();
    let a = DMatrix::identity(n, n) - &k * h;
    StateEstimate {
        mean: &pred.mean + &k * (y - h * &pred.mean),
        cov: &a * &pred.cov * a.transpose() + &k * r * k.transpose(),
    }
}

#[test]
fn wide_correntropy_kernel_recovers_the_cubature_update() {
    let mut rng = run_rng(103, 0);
    for _ in 0..50 {
        let inst = random_linear_instance(&mut rng);
        let plain = fixed_point_update(&inst.reg, &inst.pred, &Weighting::Identity).unwrap();
        let wide = fixed_point_update(&inst.reg, &inst.pred, &Weighting::Kernel(KernelParams::mcc(1e8))).unwrap();
        let scale = plain.posterior.mean.norm().max(1.0);
        assert!((&wide.posterior.mean - &plain.posterior.mean).norm() / scale <= 1e-6);
        assert!(rel_err(&wide.posterior.cov, &plain.posterior.cov) <= 1e-6);

        // and the cubature update itself is the Kalman update on linear models
        let h = inst.reg.s_mat.clone();
        let kf = kalman(&inst.pred, &h, &inst.model.r_cov, &inst.y);
        assert!((&plain.posterior.mean - &kf.mean).norm() / kf.mean.norm().max(1.0) <= 1e-9);
        assert!(rel_err(&plain.posterior.cov, &kf.cov) <= 1e-9);
    }
}

#[test]
fn eta_limits_match_independent_weight_builders() {
    let mut rng = run_rng(104, 0);
    for _ in 0..50 {
        let len = rng.random_range(2..10);
        let e: Vec<f64> = (0..len).map(|_| 2.0 * normal(&mut rng)).collect();
        let s1 = rng.random_range(0.1..10.0);
        let s2 = rng.random_range(0.1..10.0);

        // correntropy: eta1 * diag(C_s1(e_i)) with eta1 = 1 / s1^2
        let eta1 = 1.0 / (s1 * s1);
        let mcc = DMatrix::from_diagonal(&DVector::from_iterator(len, e.iter().map(|&v| eta1 * (1.0 / (1.0 + v * v / s1)))));
        let got = weight_matrices(&e, &KernelParams::meef(1.0, s1, s2)).unwrap().pi;
        assert_eq!(got, mcc);

        // error entropy: eta2 * (Phi - Psi) with eta2 = 1 / s2^2
        let eta2 = 1.0 / (s2 * s2);
        let psi = DMatrix::from_fn(len, len, |i, j| 1.0 / (1.0 + (e[j] - e[i]).powi(2) / s2));
        let mut mee = DMatrix::zeros(len, len);
        for i in 0..len {
            let mut phi = 0.0;
            for j in 0..len {
                phi += psi[(i, j)];
            }
            for j in 0..len {
                let v = if i == j { phi - psi[(i, j)] } else { -psi[(i, j)] };
                mee[(i, j)] = eta2 * v;
            }
        }
        let got = weight_matrices(&e, &KernelParams::meef(0.0, s1, s2)).unwrap().pi;
        assert_eq!(got, mee);
    }
}

#[test]
fn cubature_prediction_is_exact_on_affine_models() {
    let mut rng = run_rng(105, 0);
    for _ in 0..50 {
        let n = rng.random_range(1..=7);
        let f = DMatrix::from_fn(n, n, |_, _| normal(&mut rng));
        let b = DVector::from_fn(n, |_, _| normal(&mut rng));
        let q = random_spd(&mut rng, n, 0.01);
        let (f2, b2) = (f.clone(), b.clone());
        let model = SystemModel::new(
            std::sync::Arc::new(move |x: &DVector<f64>| &f2 * x + &b2),
            std::sync::Arc::new(|x: &DVector<f64>| x.clone()),
            q.clone(),
            DMatrix::identity(n, n),
        );
        let est = StateEstimate::new(DVector::from_fn(n, |_, _| normal(&mut rng)), random_spd(&mut rng, n, 0.1)).unwrap();
        let pred = predict(&est, &model).unwrap();
        let mean = &f * &est.mean + &b;
        let cov = &f * &est.cov * f.transpose() + &q;
        assert!((&pred.mean - &mean).amax() <= 1e-10 * mean.amax().max(1.0));
        assert!((&pred.cov - &cov).amax() <= 1e-10 * cov.amax().max(1.0));
    }
}

#[test]
fn whitened_residuals_are_white() {
    let mut rng = run_rng(106, 0);
    let f = DMatrix::from_row_slice(4, 4, &[1.0, 0.0, 0.3, 0.0, 0.0, 1.0, 0.0, 0.3, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    let h = DMatrix::from_row_slice(2, 4, &[-1.0, 0.0, -1.0, 0.0, 0.0, -1.0, 0.0, -1.0]);
    let r = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.2]);
    let model = SystemModel::linear(f, h.clone(), DMatrix::identity(4, 4) * 0.01, r.clone());
    let pred = StateEstimate::new(
        DVector::from_row_slice(&[1.0, -2.0, 0.5, 0.3]),
        DMatrix::from_row_slice(4, 4, &[2.0, 0.3, 0.1, 0.0, 0.3, 1.0, 0.0, 0.2, 0.1, 0.0, 0.5, 0.1, 0.0, 0.2, 0.1, 0.4]),
    )
    .unwrap();
    let mm = measurement_moments(&pred, &model).unwrap();
    let lp = pred.cov.clone().cholesky().unwrap().l();
    let lr = r.clone().cholesky().unwrap().l();

    let draws = 100_000;
    let mut acc = DMatrix::<f64>::zeros(6, 6);
    let mut sum = DVector::<f64>::zeros(6);
    for _ in 0..draws {
        let x = &pred.mean + &lp * DVector::from_fn(4, |_, _| normal(&mut rng));
        let y = &h * &x + &lr * DVector::from_fn(2, |_, _| normal(&mut rng));
        let reg = build_regression(&pred, &y, &mm, &model, RegressionOptions::default()).unwrap();
        let e = &reg.d - &reg.w * &x;
        sum += &e;
        acc.ger(1.0, &e, &e, 1.0);
    }
    let k = draws as f64;
    let mean = sum / k;
    let cov = acc / k - &mean * mean.transpose();
    let gap = (cov - DMatrix::<f64>::identity(6, 6)).amax();
    assert!(gap <= 0.05, "max entrywise gap {gap}");
}

#[test]
fn converged_updates_are_stationary() {
    let mut rng = run_rng(107, 0);
    let mut converged = 0;
    for _ in 0..100 {
        let inst = random_linear_instance(&mut rng);
        let params = KernelParams {
            fp_tol: 1e-10,
            fp_max_iter: 200,
            ..KernelParams::meef(rng.random_range(0.0..=1.0), 5.0, 5.0)
        };
        let out = fixed_point_update(&inst.reg, &inst.pred, &Weighting::Kernel(params)).unwrap();
        if out.status != UpdateStatus::Converged {
            continue;
        }
        converged += 1;
        let reg = &inst.reg;
        let wt = reg.w.transpose();
        let rhs = &wt * &out.pi * &reg.d;
        let residual = &rhs - &wt * &out.pi * &reg.w * &out.posterior.mean;
        assert!(residual.norm() <= 1e-8 * rhs.norm().max(1e-300), "residual {:e}", residual.norm() / rhs.norm());
    }
    assert!(converged >= 90, "only {converged} of 100 updates converged");
}
