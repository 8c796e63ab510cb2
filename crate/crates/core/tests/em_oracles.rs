mod common;

use common::*;
use frk::em::{EmConfig, FreeParams, InitRule, Moments, NoiseMode};
use frk::{e_step, fit_em, k_matrix, log_likelihood, m_step, simulate::simulate_sre, BasisSet, KModel, NoiseParams, SpatialDataset, SreParams};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

/// Conditional moments by explicit joint-Gaussian conditioning.
fn dense_moments(ds: &SpatialDataset, basis: &BasisSet, params: &SreParams) -> Moments {
    let cz = dense_cz(ds, basis, params);
    let cinv = cz.try_inverse().unwrap();
    let k = k_matrix(&params.k_model, basis).unwrap();
    let phi = dense_phi(basis, ds.locations());
    let resid = ds.z() - ds.covariates().unwrap() * &params.beta;
    let kpt = &k * phi.transpose();
    let (sd, se) = (params.noise.sigma2_delta, params.noise.sigma2_eps);
    // cov(δ(sᵢ), Z) = σ²_δ·1{s_j = sᵢ}
    let locs = ds.locations();
    let u = DMatrix::from_fn(ds.len(), ds.len(), |j, i| if same(&locs[i], &locs[j]) { sd } else { 0.0 });
    let w = &cinv * &resid;
    Moments {
        alpha_mean: &kpt * &w,
        alpha_cov: &k - &kpt * &cinv * kpt.transpose(),
        delta_mean: u.transpose() * &w,
        delta_var: DVector::from_fn(ds.len(), |i, _| sd - u.column(i).dot(&(&cinv * u.column(i)))),
        eps_var: DVector::from_fn(ds.len(), |i, _| se - se * se * cinv[(i, i)]),
    }
}

/// Expected complete-data log-likelihood with `δ + ε` merged into one
/// noise term `N = σ²_ε I + σ²_δ U`, `U` the same-site indicator. `U` is
/// diagonalized once so each evaluation is linear in `n`.
struct MergedQ {
    x: DMatrix<f64>,
    target: DVector<f64>,
    basis_t: DMatrix<f64>,
    eig: DVector<f64>,
    spread: DVector<f64>,
    s: DMatrix<f64>,
}

impl MergedQ {
    fn new(ds: &SpatialDataset, phi: &DMatrix<f64>, mo: &Moments) -> Self {
        let u = dense_noise(ds, &NoiseParams::new(1.0, 0.0).unwrap());
        let e = u.symmetric_eigen();
        let basis_t = e.eigenvectors.transpose();
        let p = phi * &mo.alpha_cov * phi.transpose();
        let spread = (&basis_t * p * &e.eigenvectors).diagonal();
        MergedQ {
            x: ds.covariates().unwrap().clone(),
            target: ds.z() - phi * &mo.alpha_mean,
            basis_t,
            eig: e.eigenvalues.map(|l| l.round()),
            spread,
            s: &mo.alpha_cov + &mo.alpha_mean * mo.alpha_mean.transpose(),
        }
    }

    fn eval(&self, beta: &DVector<f64>, k: &DMatrix<f64>, noise: &NoiseParams) -> f64 {
        let Some(ck) = k.clone().cholesky() else {
            return f64::NEG_INFINITY;
        };
        let ld_k = 2.0 * ck.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let rot = &self.basis_t * (&self.target - &self.x * beta);
        let mut noise_part = 0.0;
        for i in 0..rot.len() {
            let v = noise.sigma2_eps + noise.sigma2_delta * self.eig[i];
            if !(v > 0.0) {
                return f64::NEG_INFINITY;
            }
            noise_part += v.ln() + (rot[i] * rot[i] + self.spread[i]) / v;
        }
        -0.5 * (ld_k + ck.solve(&self.s).trace()) - 0.5 * noise_part
    }
}

/// Data drawn from the model itself, so the maximizers are interior.
fn instance(seed: u64, n: usize, k: KModel) -> (SpatialDataset, BasisSet, SreParams) {
    let mut g = rng(seed);
    let (ds, basis, mut params) = random_instance(&mut g, n);
    params.k_model = k;
    params.noise = NoiseParams::new(0.05, g.random_range(0.1..0.4)).unwrap();
    let sim = simulate_sre(&basis, &params, ds.locations().to_vec(), ds.covariates().cloned(), seed).unwrap();
    (sim.data, basis, params)
}

#[test]
fn e_step_matches_dense_conditioning() {
    let mut g = rng(21);
    for _ in 0..10 {
        let n = g.random_range(10..150);
        let (ds, basis, params) = random_instance(&mut g, n);
        let got = e_step(&ds, &basis, &params).unwrap();
        let want = dense_moments(&ds, &basis, &params);
        let scale = k_matrix(&params.k_model, &basis).unwrap().amax().max(1.0);
        assert!((&got.alpha_mean - &want.alpha_mean).amax() < 1e-8 * scale);
        assert!((&got.alpha_cov - &want.alpha_cov).amax() < 1e-8 * scale);
        assert!((&got.delta_mean - &want.delta_mean).amax() < 1e-9);
        assert!((&got.delta_var - &want.delta_var).amax() < 1e-9);
        assert!((&got.eps_var - &want.eps_var).amax() < 1e-9);
    }
}

#[test]
fn m_step_maximizes_q_for_scaled_identity() {
    for seed in 0..5 {
        let (ds, basis, params) = instance(100 + seed, 80, KModel::ScaledIdentity { variance: 0.7 });
        let mo = dense_moments(&ds, &basis, &params);
        let phi = dense_phi(&basis, ds.locations());
        let config = EmConfig {
            free: FreeParams {
                delta: false,
                ..FreeParams::default()
            },
            ..EmConfig::default()
        };
        let next = m_step(&ds, &basis, &mo, &params, &config).unwrap();
        let r = basis.len();
        let sd = params.noise.sigma2_delta;
        let qm = MergedQ::new(&ds, &phi, &mo);
        let q = |x: &[f64]| {
            let beta = DVector::from_vec(vec![x[0], x[1]]);
            let k = DMatrix::identity(r, r) * x[2].exp();
            -qm.eval(&beta, &k, &NoiseParams::new(sd, x[3].exp()).unwrap())
        };
        let (x, fx) = nelder_mead(q, &[0.0, 0.0, 0.0, -1.0], 0.5, 2000);
        let k_next = k_matrix(&next.k_model, &basis).unwrap();
        let q_next = qm.eval(&next.beta, &k_next, &next.noise);
        assert!(q_next >= -fx - 1e-7, "closed form {q_next} below search {}", -fx);
        assert!((next.noise.sigma2_eps - x[3].exp()).abs() < 1e-4 * x[3].exp());
        assert!((k_next[(0, 0)] - x[2].exp()).abs() < 1e-4 * x[2].exp());
        assert_eq!(next.noise.sigma2_delta, sd);
    }
}

#[test]
fn m_step_scales_merged_noise_at_repeated_sites() {
    let (ds, basis, params) = instance(150, 80, KModel::ScaledIdentity { variance: 0.7 });
    let mo = dense_moments(&ds, &basis, &params);
    let phi = dense_phi(&basis, ds.locations());
    let next = m_step(&ds, &basis, &mo, &params, &EmConfig::default()).unwrap();
    let share = params.noise.sigma2_delta / params.noise.xi();
    let r = basis.len();
    let qm = MergedQ::new(&ds, &phi, &mo);
    let q = |x: &[f64]| {
        let beta = DVector::from_vec(vec![x[0], x[1]]);
        let k = DMatrix::identity(r, r) * x[2].exp();
        let xi = x[3].exp();
        -qm.eval(&beta, &k, &NoiseParams::new(share * xi, (1.0 - share) * xi).unwrap())
    };
    let (x, fx) = nelder_mead(q, &[0.0, 0.0, 0.0, -1.0], 0.5, 2000);
    let q_next = qm.eval(&next.beta, &k_matrix(&next.k_model, &basis).unwrap(), &next.noise);
    assert!(q_next >= -fx - 1e-7, "closed form {q_next} below search {}", -fx);
    assert!((next.noise.xi() - x[3].exp()).abs() < 1e-4 * x[3].exp());
    assert!((next.noise.sigma2_delta / next.noise.xi() - share).abs() < 1e-12);
}

#[test]
fn m_step_profile_search_matches_direct_search() {
    let models = [
        KModel::Ar1PerResolution { variance: 0.8, rho: 0.2 },
        KModel::ExpCentroid {
            variance: 0.8,
            length_scale: 0.3,
        },
    ];
    for (seed, model) in models.into_iter().enumerate() {
        let (ds, basis, params) = instance(200 + seed as u64, 120, model.clone());
        let mo = dense_moments(&ds, &basis, &params);
        let phi = dense_phi(&basis, ds.locations());
        let config = EmConfig {
            free: FreeParams {
                beta: false,
                delta: false,
                eps: false,
                k: true,
            },
            ..EmConfig::default()
        };
        let next = m_step(&ds, &basis, &mo, &params, &config).unwrap();
        let noise = params.noise;
        let qm = MergedQ::new(&ds, &phi, &mo);
        let kmod = |x: &[f64]| match model {
            KModel::Ar1PerResolution { .. } => KModel::Ar1PerResolution {
                variance: x[0].exp(),
                rho: 0.999 * x[1].tanh(),
            },
            _ => KModel::ExpCentroid {
                variance: x[0].exp(),
                length_scale: x[1].exp(),
            },
        };
        let q = |x: &[f64]| match k_matrix(&kmod(x), &basis) {
            Ok(k) => -qm.eval(&params.beta, &k, &noise),
            Err(_) => f64::INFINITY,
        };
        let start = match model {
            KModel::Ar1PerResolution { .. } => [0.0, 0.0],
            _ => [0.0, 0.3f64.ln()],
        };
        let (_, fx) = nelder_mead(q, &start, 0.3, 1000);
        let q_next = qm.eval(&params.beta, &k_matrix(&next.k_model, &basis).unwrap(), &noise);
        assert!(q_next >= -fx - 1e-6, "model {seed}: {q_next} vs {}", -fx);
        // and the update improves on the current value
        let q_cur = qm.eval(&params.beta, &k_matrix(&params.k_model, &basis).unwrap(), &noise);
        assert!(q_next >= q_cur - 1e-12);
    }
}

#[test]
fn separate_noise_updates_match_moment_formulas() {
    let (ds, basis, params) = instance(300, 60, KModel::ScaledIdentity { variance: 0.5 });
    let mo = dense_moments(&ds, &basis, &params);
    let config = EmConfig {
        noise_mode: NoiseMode::Separate,
        ..EmConfig::default()
    };
    let next = m_step(&ds, &basis, &mo, &params, &config).unwrap();
    let n = ds.len() as f64;
    // one δ per distinct site
    let locs = ds.locations();
    let firsts: Vec<usize> = (0..ds.len()).filter(|&i| !locs[..i].iter().any(|l| same(l, &locs[i]))).collect();
    assert!(firsts.len() < ds.len(), "instance should repeat a site");
    let d2 = firsts.iter().map(|&i| mo.delta_mean[i].powi(2) + mo.delta_var[i]).sum::<f64>() / firsts.len() as f64;
    assert!((next.noise.sigma2_delta - d2).abs() < 1e-12);
    let phi = dense_phi(&basis, ds.locations());
    let target = ds.z() - &phi * &mo.alpha_mean - &mo.delta_mean;
    let x = ds.covariates().unwrap();
    let beta = (x.transpose() * x).try_inverse().unwrap() * x.transpose() * &target;
    assert!((&next.beta - &beta).amax() < 1e-10);
    let e2 = ((&target - x * &beta).norm_squared() + mo.eps_var.sum()) / n;
    assert!((next.noise.sigma2_eps - e2).abs() < 1e-12);
}

#[test]
fn em_reaches_a_likelihood_maximum() {
    let (ds, basis, params) = instance(400, 150, KModel::ScaledIdentity { variance: 1.0 });
    let config = EmConfig {
        max_iter: 5000,
        loglik_tol: 1e-13,
        param_tol: 1e-10,
        init: InitRule::Given,
        free: FreeParams {
            delta: false,
            ..FreeParams::default()
        },
        ..EmConfig::default()
    };
    let fit = fit_em(&ds, &basis, params.clone(), config).unwrap();
    for w in fit.loglik_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-9);
    }
    let sd = params.noise.sigma2_delta;
    let negll = |x: &[f64]| {
        let p = SreParams::new(
            DVector::from_vec(vec![x[0], x[1]]),
            KModel::ScaledIdentity { variance: x[2].exp() },
            NoiseParams::new(sd, x[3].exp()).unwrap(),
        )
        .unwrap();
        -log_likelihood(&ds, &basis, &p).unwrap()
    };
    let start = [fit.params.beta[0], fit.params.beta[1], 0.0, -1.0];
    let (_, fx) = nelder_mead(negll, &start, 0.5, 3000);
    assert!(fit.loglik() >= -fx - 1e-4, "EM {} vs direct {}", fit.loglik(), -fx);
}
