mod common;

use common::crps_quadrature;
use frk::diagnostics::{coverage_and_interval_score, crps_gaussian, crps_sample, rmspe, Diagnostics};
use frk::engine::PredictiveResult;
use frk::Location;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

#[test]
fn gaussian_crps_matches_quadrature() {
    let mut g = ChaCha8Rng::seed_from_u64(51);
    for _ in 0..30 {
        let (mu, sigma) = (g.random_range(-3.0..3.0), g.random_range(0.1..3.0));
        let z = g.random_range(-5.0..5.0);
        let closed = crps_gaussian(mu, sigma, z).unwrap();
        assert!((closed - crps_quadrature(mu, sigma, z)).abs() < 1e-6);
    }
    let centred = crps_gaussian(0.0, 1.0, 0.0).unwrap();
    assert!((centred - crps_quadrature(0.0, 1.0, 0.0)).abs() < 1e-6);
    // (√2 − 1)/√π
    assert!((centred - (2f64.sqrt() - 1.0) / std::f64::consts::PI.sqrt()).abs() < 1e-15);
}

#[test]
fn sample_crps_matches_pairwise_definition() {
    let mut g = ChaCha8Rng::seed_from_u64(52);
    for _ in 0..20 {
        let xs: Vec<f64> = (0..g.random_range(1..60)).map(|_| g.random_range(-2.0..2.0)).collect();
        let z = g.random_range(-3.0..3.0);
        let n = xs.len() as f64;
        let first = xs.iter().map(|x| (x - z).abs()).sum::<f64>() / n;
        let pairs = xs.iter().flat_map(|a| xs.iter().map(move |b| (a - b).abs())).sum::<f64>() / (n * n);
        assert!((crps_sample(&xs, z).unwrap() - (first - 0.5 * pairs)).abs() < 1e-12);
    }
}

#[test]
fn scores_match_brute_force() {
    let mut g = ChaCha8Rng::seed_from_u64(53);
    for _ in 0..20 {
        let n = g.random_range(1..200);
        let truth: Vec<f64> = (0..n).map(|_| g.random_range(-3.0..3.0)).collect();
        let means: Vec<f64> = (0..n).map(|_| g.random_range(-3.0..3.0)).collect();
        let half: Vec<f64> = (0..n).map(|_| g.random_range(0.0..2.0)).collect();
        let intervals: Vec<(f64, f64)> = means.iter().zip(&half).map(|(m, h)| (m - h, m + h)).collect();

        let mut sse = 0.0;
        let mut inside = 0;
        let mut score = 0.0;
        for i in 0..n {
            sse += (means[i] - truth[i]).powi(2);
            let (l, u) = intervals[i];
            let z = truth[i];
            if z >= l && z <= u {
                inside += 1;
            }
            let below = if z < l { 20.0 * (l - z) } else { 0.0 };
            let above = if z > u { 20.0 * (z - u) } else { 0.0 };
            score += (u - l) + below + above;
        }
        assert_eq!(rmspe(&means, &truth).unwrap(), (sse / n as f64).sqrt());
        let (cov, is) = coverage_and_interval_score(&intervals, &truth, 0.1).unwrap();
        assert_eq!(cov, inside as f64 / n as f64);
        assert_eq!(is, score / n as f64);
    }
}

#[test]
fn diagnostics_agree_with_component_metrics() {
    let mut g = ChaCha8Rng::seed_from_u64(54);
    let preds: Vec<PredictiveResult> = (0..100)
        .map(|i| PredictiveResult::gaussian(Location::from([i as f64]), g.random_range(-1.0..1.0), g.random_range(0.1..2.0), 0.9))
        .collect();
    let truth: Vec<f64> = (0..100).map(|_| g.random_range(-2.0..2.0)).collect();
    let d = Diagnostics::from_gaussian("m", &preds, &truth, 1.5).unwrap();
    let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let intervals: Vec<(f64, f64)> = preds.iter().map(|p| (p.lower, p.upper)).collect();
    let (cov, is) = coverage_and_interval_score(&intervals, &truth, 0.1).unwrap();
    let crps = preds
        .iter()
        .zip(&truth)
        .map(|(p, &z)| crps_gaussian(p.mean, p.variance.sqrt(), z).unwrap())
        .sum::<f64>()
        / 100.0;
    assert_eq!(d.rmspe, rmspe(&means, &truth).unwrap());
    assert_eq!((d.cov90, d.is90), (cov, is));
    assert!((d.crps - crps).abs() < 1e-15);
    assert_eq!(d.run_time, 1.5);
    let wrong_level = vec![PredictiveResult::gaussian(Location::from([0.0]), 0.0, 1.0, 0.95)];
    assert!(Diagnostics::from_gaussian("m", &wrong_level, &[0.0], 0.0).is_err());
}

#[test]
fn gaussian_intervals_use_normal_quantiles() {
    let p = PredictiveResult::gaussian(Location::from([0.0]), 2.0, 4.0, 0.9);
    let q = Normal::standard().inverse_cdf(0.95);
    assert!((p.upper - (2.0 + 2.0 * q)).abs() < 1e-12);
    assert!((p.lower - (2.0 - 2.0 * q)).abs() < 1e-12);
}
