//! Box-Cox trans-Gaussian prediction.
//!
//! Data are assumed positive and already scaled to be unitless. The Gaussian
//! model is fitted to `g(Z)`; predictive distributions are mapped back to the
//! original scale by Monte Carlo.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::data::SpatialDataset;
use crate::engine::{check_level, predict, PredictiveResult, SreParams, Targets};
use crate::error::{FrkError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCox {
    pub lambda: f64,
}

impl BoxCox {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(FrkError::InvalidParameter(format!("Box-Cox lambda {lambda} not finite")));
        }
        Ok(BoxCox { lambda })
    }

    pub fn forward(&self, y: f64) -> Result<f64> {
        bc_forward(y, self.lambda)
    }

    pub fn inverse(&self, w: f64) -> Result<f64> {
        bc_inverse(w, self.lambda)
    }
}

/// `(y^λ − 1)/λ`, or `log y` at `λ = 0`.
pub fn bc_forward(y: f64, lambda: f64) -> Result<f64> {
    if !y.is_finite() || (lambda <= 0.0 && y <= 0.0) || y < 0.0 {
        return Err(FrkError::InvalidParameter(format!("Box-Cox input {y} outside the domain for lambda {lambda}")));
    }
    Ok(if lambda == 0.0 { y.ln() } else { (y.powf(lambda) - 1.0) / lambda })
}

/// `(λw + 1)^{1/λ}`, or `exp w` at `λ = 0`.
pub fn bc_inverse(w: f64, lambda: f64) -> Result<f64> {
    if lambda == 0.0 {
        return Ok(w.exp());
    }
    let base = lambda * w + 1.0;
    if !(base > 0.0) {
        return Err(FrkError::InvalidParameter(format!(
            "Box-Cox inverse undefined at w = {w} for lambda {lambda}"
        )));
    }
    Ok(base.powf(1.0 / lambda))
}

/// Replaces `z` by `g(z)`.
pub fn transform_dataset(ds: &SpatialDataset, bc: BoxCox) -> Result<SpatialDataset> {
    let w: Vec<f64> = ds.z().iter().map(|&y| bc.forward(y)).collect::<Result<_>>()?;
    ds.with_z(DVector::from_vec(w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub samples: usize,
    pub seed: u64,
    pub keep_samples: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            samples: 2000,
            seed: 0,
            keep_samples: false,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 100 {
            return Err(FrkError::InvalidParameter(format!(
                "Monte Carlo needs at least 100 samples, got {}",
                self.samples
            )));
        }
        Ok(())
    }
}

/// Largest tolerated share of redrawn samples.
pub const MAX_REJECT_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransPrediction {
    /// Sample mean, sample variance and empirical central interval.
    pub result: PredictiveResult,
    /// Monte Carlo standard error of the mean, `sqrt(var / N)`.
    pub mc_se: f64,
    /// Fraction of draws that fell outside the inverse domain and were redrawn.
    pub rejected: f64,
    pub samples: Option<Vec<f64>>,
}

/// Type-7 empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Back-transforms `Gau(mean, variance)` by sampling.
pub fn sample_back_transform(
    mean: f64,
    variance: f64,
    bc: BoxCox,
    mc: &McConfig,
    stream: u64,
    level: f64,
    location: crate::data::Location,
) -> Result<TransPrediction> {
    let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
    rng.set_stream(stream);
    let sd = variance.max(0.0).sqrt();
    let max_reject = (MAX_REJECT_FRACTION * mc.samples as f64).floor() as usize;
    let mut rejected = 0usize;
    let mut ys = Vec::with_capacity(mc.samples);
    while ys.len() < mc.samples {
        let w = mean + sd * rng.sample::<f64, _>(StandardNormal);
        match bc.inverse(w) {
            Ok(y) if y.is_finite() => ys.push(y),
            _ => {
                rejected += 1;
                if rejected > max_reject {
                    return Err(FrkError::MonteCarlo(format!(
                        "more than {:.0}% of back-transformed draws invalid at target {stream} (lambda {})",
                        100.0 * MAX_REJECT_FRACTION,
                        bc.lambda
                    )));
                }
            }
        }
    }
    let n = ys.len() as f64;
    let m = ys.iter().sum::<f64>() / n;
    let var = ys.iter().map(|y| (y - m) * (y - m)).sum::<f64>() / (n - 1.0);
    let mut sorted = ys.clone();
    sorted.sort_by(f64::total_cmp);
    let a = 0.5 * (1.0 - level);
    Ok(TransPrediction {
        result: PredictiveResult {
            location,
            mean: m,
            variance: var,
            lower: quantile_sorted(&sorted, a),
            upper: quantile_sorted(&sorted, 1.0 - a),
            level,
        },
        mc_se: (var / n).sqrt(),
        rejected: rejected as f64 / (mc.samples + rejected) as f64,
        samples: mc.keep_samples.then_some(ys),
    })
}

/// Original-scale predictive summaries for a model fitted to `g(Z)`.
/// `ds` holds the transformed data.
pub fn predict_trans(
    ds: &SpatialDataset,
    basis: &BasisSet,
    params: &SreParams,
    bc: BoxCox,
    targets: &Targets,
    mc: &McConfig,
    level: f64,
) -> Result<Vec<TransPrediction>> {
    mc.validate()?;
    check_level(level)?;
    let gauss = predict(ds, basis, params, targets, level)?;
    gauss
        .into_par_iter()
        .enumerate()
        .map(|(i, g)| sample_back_transform(g.mean, g.variance, bc, mc, i as u64, level, g.location))
        .collect()
}
