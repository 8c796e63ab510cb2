//! Acceptance suite. Criteria run sequentially inside one test so that the
//! timed ones are not disturbed by parallel tests; each prints one line.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use common::*;
use frk::bivariate::{cokrige, joint_block, BivariateDataset, BivariateModel};
use frk::config::RunConfig;
use frk::diagnostics::{coverage_and_interval_score, crps_gaussian, rmspe};
use frk::dynamic::{kalman_filter, kalman_smoother, simulate_dynamic, DynamicStModel};
use frk::em::{EmConfig, FreeParams, InitRule};
use frk::engine::fitted_solve;
use frk::pipeline::{run_bench, run_pipeline, Command};
use frk::simulate::simulate_sre;
use frk::transgauss::{bc_forward, bc_inverse, predict_trans, transform_dataset, BoxCox, McConfig};
use frk::{
    build_multires, cov_y, fit_em, predict, smw_apply, KModel, Location, MultiResSpec, NoiseParams, SpatialDataset, SreParams, Targets,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

const SMW_TOL: f64 = 1e-8;
const SMW_BUDGET: Duration = Duration::from_secs(30);
const PREDICT_TOL: f64 = 1e-8;
const MONOTONE_TOL: f64 = 1e-9;
const EPS_BAND: f64 = 0.20;
const EPS_MIN_SEEDS: usize = 8;
const FIT_BUDGET: Duration = Duration::from_secs(60);
const MAX_SLOPE: f64 = 1.3;
const BENCH_BUDGET: Duration = Duration::from_secs(600);
const COV90_RANGE: (f64, f64) = (0.85, 0.95);
const KALMAN_TOL: f64 = 1e-8;
const REDUCTION_SLACK: f64 = 1e-10;
const EQUALITY_TOL: f64 = 1e-10;
const CRPS_TOL: f64 = 1e-6;
const CRPS_CENTRED: f64 = 0.233695;
const CRPS_CENTRED_TOL: f64 = 1e-6;
const ROUND_TRIP_TOL: f64 = 1e-12;
const MC_SE_MULTIPLE: f64 = 3.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Largest `‖C_Z x − v‖/‖v‖` over 50 instances with `n ≤ 500`, `r ≤ 50`.
fn smw_equivalence() -> Outcome {
    let start = Instant::now();
    let mut g = rng(1001);
    let mut worst = 0f64;
    let mut max_r = 0;
    for _ in 0..50 {
        let n = g.random_range(20..=500);
        let (ds, basis, params) = random_instance(&mut g, n);
        max_r = max_r.max(basis.len());
        let s = fitted_solve(&ds, &basis, &params).unwrap();
        let v = DVector::from_fn(n, |_, _| g.random_range(-1.0..1.0));
        let x = smw_apply(&s, &v).unwrap();
        let cz = dense_cz(&ds, &basis, &params);
        worst = worst.max((&cz * x - &v).norm() / v.norm());
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= SMW_TOL && elapsed < SMW_BUDGET && max_r <= 50,
        format!("max residual {worst:.2e} (tol {SMW_TOL:.0e}), r <= {max_r}, {:.2}s (budget 30s)", elapsed.as_secs_f64()),
    )
}

/// Mean error relative to `max(|m|, 1)`, variance error relative to
/// `max(v, prior variance)`, over 50 instances with `n ≤ 200`.
fn prediction_oracle() -> Outcome {
    let mut g = rng(1002);
    let (mut worst_mean, mut worst_var) = (0f64, 0f64);
    for _ in 0..50 {
        let n = g.random_range(10..=200);
        let (ds, basis, params) = random_instance(&mut g, n);
        let mut locs = uniform_2d(&mut g, 10);
        locs.extend(ds.locations()[..3].iter().cloned());
        let x0 = DMatrix::from_fn(locs.len(), 2, |i, j| if j == 0 { 1.0 } else { locs[i].coords()[1] });
        let got = predict(&ds, &basis, &params, &Targets::with_covariates(locs.clone(), x0.clone()).unwrap(), 0.9).unwrap();
        let want = dense_conditional(&ds, &basis, &params, &locs, Some(&x0));
        for (p, (m, v, prior)) in got.iter().zip(&want) {
            worst_mean = worst_mean.max(rel_err(p.mean, *m, 1.0));
            worst_var = worst_var.max(rel_err(p.variance, *v, *prior));
        }
    }
    outcome(
        worst_mean <= PREDICT_TOL && worst_var <= PREDICT_TOL,
        format!("max mean err {worst_mean:.2e}, max variance err {worst_var:.2e} (tol {PREDICT_TOL:.0e})"),
    )
}

/// Ten fits with `n = 2000`, `r = 50`, `σ²_δ = 0` known, `σ²_ε = 0.25`.
fn em_recovery() -> Outcome {
    let basis = build_multires(&MultiResSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], &[vec![3, 3], vec![4, 4], vec![5, 5]], 1.5)).unwrap();
    let truth = SreParams::new(
        DVector::from_vec(vec![1.0, 0.5, -0.5]),
        KModel::ExpCentroid {
            variance: 1.0,
            length_scale: 0.3,
        },
        NoiseParams::new(0.0, 0.25).unwrap(),
    )
    .unwrap();
    let config = EmConfig {
        free: FreeParams {
            delta: false,
            ..FreeParams::default()
        },
        init: InitRule::Moments,
        ..EmConfig::default()
    };
    let (mut recovered, mut monotone, mut slowest) = (0, true, Duration::ZERO);
    let mut estimates = Vec::new();
    for seed in 0..10u64 {
        let mut g = rng(2000 + seed);
        let locs = uniform_2d(&mut g, 2000);
        let x = DMatrix::from_fn(2000, 3, |i, j| if j == 0 { 1.0 } else { locs[i].coords()[j - 1] });
        let ds = simulate_sre(&basis, &truth, locs, Some(x), seed).unwrap().data;
        let start = Instant::now();
        let fit = fit_em(&ds, &basis, truth.clone(), config).unwrap();
        slowest = slowest.max(start.elapsed());
        monotone &= fit.loglik_trace.windows(2).all(|w| w[1] >= w[0] - MONOTONE_TOL);
        let eps = fit.params.noise.sigma2_eps;
        estimates.push(eps);
        if (eps - 0.25).abs() <= EPS_BAND * 0.25 {
            recovered += 1;
        }
    }
    let shown: Vec<String> = estimates.iter().map(|e| format!("{e:.3}")).collect();
    outcome(
        monotone && recovered >= EPS_MIN_SEEDS && slowest < FIT_BUDGET,
        format!(
            "monotone {monotone}, sigma2_eps within 20% in {recovered}/10 [{}], slowest fit {:.2}s (budget 60s)",
            shown.join(" "),
            slowest.as_secs_f64()
        ),
    )
}

/// Median prediction time over `n ∈ {10³, 10⁴, 10⁵}` with `r = 100`.
fn scaling() -> Outcome {
    let text = "domain_lower = [0.0, 0.0]\ndomain_upper = [1.0, 1.0]\nresolutions = [[6, 6], [8, 8]]\n\
                sigma2_delta = 0.0\nsigma2_eps = 0.25\nbench_n = [1000, 10000, 100000]\nbench_dense_max_n = 1000\n";
    let cfg = RunConfig::from_toml_str(text, std::path::Path::new(".")).unwrap();
    let start = Instant::now();
    let (rows, slope) = run_bench(&cfg).unwrap();
    let elapsed = start.elapsed();
    let times: Vec<String> = rows.iter().map(|r| format!("n={} {:.4}s", r.n, r.smw_seconds)).collect();
    outcome(
        rows.iter().all(|r| r.r == 100) && slope <= MAX_SLOPE && elapsed < BENCH_BUDGET,
        format!("slope {slope:.3} (max {MAX_SLOPE}), {}, total {:.1}s", times.join(", "), elapsed.as_secs_f64()),
    )
}

/// Simulate, fit, predict and validate through the pipeline.
fn coverage() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let text = "domain_lower = [0.0, 0.0]\ndomain_upper = [1.0, 1.0]\nresolutions = [[3, 3], [6, 6]]\n\
                k_model = \"exp_centroid\"\nk_variance = 1.0\nk_length_scale = 0.3\n\
                sigma2_delta = 0.0\nsigma2_eps = 0.2\nfree_delta = false\n\
                sim_n_train = 2000\nsim_n_test = 4000\nsim_beta = [1.0, 0.5, -0.5]\nseed = 5\n";
    let cfg = RunConfig::from_toml_str(text, dir.path()).unwrap();
    for cmd in [Command::Simulate, Command::Fit, Command::Predict, Command::Validate] {
        run_pipeline(cmd, &cfg, dir.path(), None).unwrap();
    }
    let mut rdr = csv::Reader::from_path(dir.path().join("diagnostics.csv")).unwrap();
    let row = rdr.records().next().unwrap().unwrap();
    let cov90: f64 = row[2].parse().unwrap();
    let n_test = csv::Reader::from_path(dir.path().join("test.csv")).unwrap().records().count();
    outcome(
        n_test == 4000 && (COV90_RANGE.0..=COV90_RANGE.1).contains(&cov90),
        format!("{} COV90 {cov90:.4} on {n_test} test points (range [{}, {}])", &row[0], COV90_RANGE.0, COV90_RANGE.1),
    )
}

/// Disjoint supports give exactly zero covariance; overlapping ones do not.
fn support_overlap() -> Outcome {
    let k = KModel::ScaledIdentity { variance: 1.0 };
    let noise = NoiseParams::new(0.0, 0.1).unwrap();
    let build = |ratio: f64| build_multires(&MultiResSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], &[vec![4, 4]], ratio)).unwrap();
    let mut disjoint_max = 0f64;
    let mut overlap_min = f64::INFINITY;
    let mut pairs = [0usize; 2];
    for (ratio, disjoint) in [(0.45, true), (1.5, false)] {
        let basis = build(ratio);
        let km = frk::k_matrix(&k, &basis).unwrap();
        let centers: Vec<Vec<f64>> = basis.functions().iter().map(|f| f.center().unwrap()).collect();
        let dist = |a: &[f64], b: &[f64]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        // grid neighbours sit at the smallest nonzero center distance
        let spacing = centers
            .iter()
            .flat_map(|a| centers.iter().map(move |b| dist(a, b)))
            .filter(|&d| d > 0.0)
            .fold(f64::INFINITY, f64::min);
        for i in 0..centers.len() {
            for j in 0..centers.len() {
                let (a, b) = (&centers[i], &centers[j]);
                if i == j || (dist(a, b) - spacing).abs() > 1e-9 * spacing {
                    continue;
                }
                pairs[usize::from(!disjoint)] += 1;
                let s = Location::new(a.clone()).unwrap();
                let u = Location::new(b.clone()).unwrap();
                let mid = Location::new(vec![(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]).unwrap();
                if disjoint {
                    disjoint_max = disjoint_max.max(cov_y(&s, &u, &basis, &km, &noise).unwrap().abs());
                } else {
                    overlap_min = overlap_min.min(cov_y(&s, &u, &basis, &km, &noise).unwrap());
                    overlap_min = overlap_min.min(cov_y(&s, &mid, &basis, &km, &noise).unwrap());
                }
            }
        }
    }
    outcome(
        pairs[0] > 0 && pairs[1] > 0 && disjoint_max == 0.0 && overlap_min > 0.0,
        format!(
            "ratio 0.45: {} adjacent pairs, max |cov| {disjoint_max:e}; ratio 1.5: {} pairs, min cov {overlap_min:.4e}",
            pairs[0], pairs[1]
        ),
    )
}

fn kalman_equivalence() -> Outcome {
    let mut g = rng(1007);
    let basis = build_multires(&MultiResSpec::new(vec![0.0, 0.0], vec![1.0, 1.0], &[vec![2, 2]], 1.5)).unwrap();
    let r = basis.len();
    let mut worst = 0f64;
    for seed in 0..20 {
        let model = DynamicStModel {
            basis: basis.clone(),
            m: DMatrix::from_fn(r, r, |_, _| g.random_range(-0.6..0.6)),
            c_omega: random_psd(&mut g, r, r) * 0.5,
            m0: DVector::from_fn(r, |_, _| g.random_range(-1.0..1.0)),
            p0: random_psd(&mut g, r, r),
            noise: NoiseParams::new(g.random_range(0.0..0.1), g.random_range(0.05..0.3)).unwrap(),
            beta: DVector::zeros(0),
        };
        let sites: Vec<Vec<Location>> = (0..5)
            .map(|t| {
                let n = g.random_range(1..=30);
                if t == 1 && seed % 2 == 0 {
                    Vec::new()
                } else {
                    uniform_2d(&mut g, n)
                }
            })
            .collect();
        let (data, _) = simulate_dynamic(&model, &sites, None, seed).unwrap();
        let filt = kalman_filter(&model, &data).unwrap();
        let smooth = kalman_smoother(&model, &data).unwrap();
        let (sm, sc) = batch_posterior(&model, &data, 5);
        for t in 0..5 {
            let (fm, fc) = batch_posterior(&model, &data, t + 1);
            let (fm, fc) = block(&fm, &fc, t, r);
            let (m, c) = block(&sm, &sc, t, r);
            worst = worst
                .max((&filt.means[t] - fm).amax())
                .max((&filt.covs[t] - fc).amax())
                .max((&smooth.means[t] - m).amax())
                .max((&smooth.covs[t] - c).amax());
        }
    }
    outcome(worst <= KALMAN_TOL, format!("max abs difference {worst:.2e} over 20 instances (tol {KALMAN_TOL:.0e})"))
}

fn variance_reduction() -> Outcome {
    let mut g = rng(1008);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_equal = 0f64;
    for case in 0..10 {
        let a_scale = if case < 8 { 1.0 } else { 0.0 };
        let (b1, b2) = (random_basis(&mut g), random_basis(&mut g));
        let (r1, r2) = (b1.len(), b2.len());
        let k11 = random_psd(&mut g, r1, r1);
        let k21 = random_psd(&mut g, r2, r2);
        let a = DMatrix::from_fn(r2, r1, |_, _| a_scale * g.random_range(-1.0..1.0));
        let m = BivariateModel::new(
            b1,
            b2,
            k11,
            a,
            k21,
            NoiseParams::new(0.05, 0.2).unwrap(),
            NoiseParams::new(0.05, 0.2).unwrap(),
        )
        .unwrap();
        let data = |g: &mut rand_chacha::ChaCha8Rng, n: usize| {
            let locs = uniform_2d(g, n);
            SpatialDataset::new(locs, DVector::from_fn(n, |_, _| g.random_range(-2.0..2.0)), None).unwrap()
        };
        let (d1, d2) = (data(&mut g, 60), data(&mut g, 30));
        let targets = uniform_2d(&mut g, 30);
        let both = cokrige(&m, &BivariateDataset::new(Some(d1), Some(d2.clone())).unwrap(), 2, &targets, 0.9).unwrap();
        let params = SreParams::new(DVector::zeros(0), KModel::Unstructured { k: joint_block(&m, 2, 2).unwrap() }, m.noise2).unwrap();
        let alone = predict(&d2, &m.basis2, &params, &Targets::new(targets), 0.9).unwrap();
        for (b, u) in both.iter().zip(&alone) {
            if a_scale == 0.0 {
                worst_equal = worst_equal.max((b.variance - u.variance).abs());
            } else {
                worst_excess = worst_excess.max(b.variance - u.variance);
            }
        }
    }
    outcome(
        worst_excess <= REDUCTION_SLACK && worst_equal <= EQUALITY_TOL,
        format!("A != 0: max(var_co - var_uni) {worst_excess:.2e} (slack {REDUCTION_SLACK:.0e}); A = 0: max |diff| {worst_equal:.2e}"),
    )
}

fn metric_oracles() -> Outcome {
    let mut g = rng(1009);
    let mut exact = true;
    for _ in 0..50 {
        let n = g.random_range(1..300);
        let truth: Vec<f64> = (0..n).map(|_| g.random_range(-3.0..3.0)).collect();
        let pred: Vec<f64> = (0..n).map(|_| g.random_range(-3.0..3.0)).collect();
        let iv: Vec<(f64, f64)> = pred
            .iter()
            .map(|m| {
                let h = g.random_range(0.0..2.0);
                (m - h, m + h)
            })
            .collect();
        let (mut sse, mut hits, mut score) = (0.0, 0usize, 0.0);
        for i in 0..n {
            sse += (pred[i] - truth[i]).powi(2);
            let ((l, u), z) = (iv[i], truth[i]);
            hits += usize::from(l <= z && z <= u);
            score += (u - l) + if z < l { 20.0 * (l - z) } else { 0.0 } + if z > u { 20.0 * (z - u) } else { 0.0 };
        }
        let (cov, is) = coverage_and_interval_score(&iv, &truth, 0.1).unwrap();
        exact &= rmspe(&pred, &truth).unwrap() == (sse / n as f64).sqrt();
        exact &= cov == hits as f64 / n as f64;
        exact &= is == score / n as f64;
    }
    let mut worst = 0f64;
    for _ in 0..20 {
        let (mu, sigma, z) = (g.random_range(-2.0..2.0), g.random_range(0.2..2.0), g.random_range(-4.0..4.0));
        worst = worst.max((crps_gaussian(mu, sigma, z).unwrap() - crps_quadrature(mu, sigma, z)).abs());
    }
    let centred = crps_gaussian(0.0, 1.0, 0.0).unwrap();
    worst = worst.max((centred - crps_quadrature(0.0, 1.0, 0.0)).abs());
    outcome(
        exact && worst <= CRPS_TOL && (centred - CRPS_CENTRED).abs() <= CRPS_CENTRED_TOL,
        format!("brute-force scores exact: {exact}; CRPS vs quadrature {worst:.2e} (tol {CRPS_TOL:.0e}); CRPS(0;0,1) = {centred:.6}"),
    )
}

fn box_cox() -> Outcome {
    let mut g = rng(1010);
    let mut worst_rt = 0f64;
    for _ in 0..10_000 {
        let y = g.random_range(0.05..100.0);
        let lambda = g.random_range(-1.0..2.0);
        let back = bc_inverse(bc_forward(y, lambda).unwrap(), lambda).unwrap();
        worst_rt = worst_rt.max((back - y).abs() / y.max(1.0));
    }
    let basis = random_basis(&mut g);
    let locs = uniform_2d(&mut g, 200);
    let ds = SpatialDataset::new(locs, DVector::from_fn(200, |_, _| g.random_range(4.0..8.0)), None).unwrap();
    let bc = BoxCox::new(1.0).unwrap();
    let w = transform_dataset(&ds, bc).unwrap();
    let params =
        SreParams::new(DVector::zeros(0), KModel::ScaledIdentity { variance: 1.0 }, NoiseParams::new(0.05, 0.2).unwrap()).unwrap();
    let targets = Targets::new(uniform_2d(&mut g, 50));
    let mc = McConfig {
        samples: 5000,
        seed: 7,
        keep_samples: false,
    };
    let trans = predict_trans(&w, &basis, &params, bc, &targets, &mc, 0.9).unwrap();
    let gauss = predict(&w, &basis, &params, &targets, 0.9).unwrap();
    let worst_z = trans
        .iter()
        .zip(&gauss)
        .map(|(t, g)| (t.result.mean - (g.mean + 1.0)).abs() / t.mc_se)
        .fold(0f64, f64::max);
    outcome(
        worst_rt <= ROUND_TRIP_TOL && worst_z <= MC_SE_MULTIPLE,
        format!("round trip {worst_rt:.2e} (tol {ROUND_TRIP_TOL:.0e}); lambda = 1 shift within {worst_z:.2} MC s.e. (max {MC_SE_MULTIPLE})"),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("SMW/dense equivalence", smw_equivalence),
        ("prediction oracle", prediction_oracle),
        ("EM monotonicity and recovery", em_recovery),
        ("scaling contract", scaling),
        ("coverage calibration", coverage),
        ("support overlap artefact", support_overlap),
        ("Kalman/batch equivalence", kalman_equivalence),
        ("bivariate variance reduction", variance_reduction),
        ("metric oracles", metric_oracles),
        ("Box-Cox", box_cox),
    ];
    let mut failed = Vec::new();
    let mut err = std::io::stderr();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let _ = writeln!(err, "criterion {:>2} {tag} {name}: {}", i + 1, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
