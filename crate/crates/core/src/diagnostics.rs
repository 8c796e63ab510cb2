//! Out-of-sample scoring of predictive distributions.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::engine::PredictiveResult;
use crate::error::{FrkError, Result};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(FrkError::Dimension(format!("{a} predictions for {b} observations")));
    }
    Ok(())
}

/// Root mean squared prediction error.
pub fn rmspe(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths(pred.len(), truth.len())?;
    let sse: f64 = pred.iter().zip(truth).map(|(p, z)| (p - z) * (p - z)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Empirical coverage and mean interval score of `(l, u)` intervals with
/// nominal level `1 − alpha`. The score of one interval is
/// `(u − l) + (2/α)(l − z)·1{z < l} + (2/α)(z − u)·1{z > u}`.
pub fn coverage_and_interval_score(intervals: &[(f64, f64)], truth: &[f64], alpha: f64) -> Result<(f64, f64)> {
    check_lengths(intervals.len(), truth.len())?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(FrkError::InvalidParameter(format!("alpha {alpha} outside (0,1)")));
    }
    let mut covered = 0usize;
    let mut score = 0.0;
    for (i, (&(l, u), &z)) in intervals.iter().zip(truth).enumerate() {
        if l > u {
            return Err(FrkError::InvalidParameter(format!("interval {i} has lower {l} > upper {u}")));
        }
        if l <= z && z <= u {
            covered += 1;
        }
        let below = if z < l { 2.0 / alpha * (l - z) } else { 0.0 };
        let above = if z > u { 2.0 / alpha * (z - u) } else { 0.0 };
        score += (u - l) + below + above;
    }
    let n = truth.len() as f64;
    Ok((covered as f64 / n, score / n))
}

/// CRPS of `Gau(μ, σ²)` at `z`: `σ[ω(2Φ(ω) − 1) + 2φ(ω) − 1/√π]`, `ω = (z − μ)/σ`.
pub fn crps_gaussian(mu: f64, sigma: f64, z: f64) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(FrkError::InvalidParameter(format!("sigma {sigma} negative")));
    }
    if sigma == 0.0 {
        return Ok((z - mu).abs());
    }
    let n = Normal::standard();
    let w = (z - mu) / sigma;
    Ok(sigma * (w * (2.0 * n.cdf(w) - 1.0) + 2.0 * n.pdf(w) - 1.0 / std::f64::consts::PI.sqrt()))
}

/// CRPS of the empirical distribution of `samples`: `E|X − z| − ½E|X − X'|`.
pub fn crps_sample(samples: &[f64], z: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(FrkError::InvalidParameter("no samples".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let abs_dev = s.iter().map(|x| (x - z).abs()).sum::<f64>() / n;
    // Σ_{i,j}|x_i − x_j| = 2 Σ_i (2i − n − 1) x_(i) over the sorted sample
    let spread: f64 = s
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * (i + 1) as f64 - n - 1.0) * x)
        .sum::<f64>()
        / (n * n);
    Ok(abs_dev - spread)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub method: String,
    pub rmspe: f64,
    pub cov90: f64,
    pub is90: f64,
    pub crps: f64,
    /// Seconds.
    pub run_time: f64,
}

pub const DIAGNOSTIC_COLUMNS: [&str; 6] = ["Method", "RMSPE", "COV90", "IS90", "CRPS", "Run Time"];

impl Diagnostics {
    /// Scores Gaussian predictive distributions; intervals are taken from the
    /// results and must be at level 0.9.
    pub fn from_gaussian(method: &str, preds: &[PredictiveResult], truth: &[f64], run_time: f64) -> Result<Self> {
        check_lengths(preds.len(), truth.len())?;
        let crps = preds
            .iter()
            .zip(truth)
            .map(|(p, &z)| crps_gaussian(p.mean, p.std_error(), z))
            .sum::<Result<f64>>()?
            / truth.len() as f64;
        Self::with_crps(method, preds, truth, crps, run_time)
    }

    /// Scores predictions whose CRPS was computed elsewhere.
    pub fn with_crps(method: &str, preds: &[PredictiveResult], truth: &[f64], crps: f64, run_time: f64) -> Result<Self> {
        check_lengths(preds.len(), truth.len())?;
        if let Some(p) = preds.iter().find(|p| (p.level - 0.9).abs() > 1e-12) {
            return Err(FrkError::InvalidParameter(format!("COV90 needs 0.9 intervals, got level {}", p.level)));
        }
        let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
        let intervals: Vec<(f64, f64)> = preds.iter().map(|p| (p.lower, p.upper)).collect();
        let (cov90, is90) = coverage_and_interval_score(&intervals, truth, 0.1)?;
        let d = Diagnostics {
            method: method.to_string(),
            rmspe: rmspe(&means, truth)?,
            cov90,
            is90,
            crps,
            run_time,
        };
        if ![d.rmspe, d.cov90, d.is90, d.crps, d.run_time].iter().all(|v| v.is_finite()) {
            return Err(FrkError::Numeric(format!("non-finite diagnostics for {method}")));
        }
        Ok(d)
    }
}

/// CSV with the columns of [`DIAGNOSTIC_COLUMNS`], in that order.
pub fn write_diagnostics_csv(path: impl AsRef<Path>, rows: &[Diagnostics]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| FrkError::Schema(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| FrkError::Schema(format!("{}: {e}", path.display()));
    w.write_record(DIAGNOSTIC_COLUMNS).map_err(io)?;
    for d in rows {
        w.write_record([
            d.method.clone(),
            d.rmspe.to_string(),
            d.cov90.to_string(),
            d.is90.to_string(),
            d.crps.to_string(),
            d.run_time.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| FrkError::io(path, e))
}

/// Fixed-width text table.
pub fn format_table(rows: &[Diagnostics]) -> String {
    let width = rows.iter().map(|d| d.method.len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>9}  {:>7}  {:>9}  {:>9}  {:>10}",
        DIAGNOSTIC_COLUMNS[0],
        DIAGNOSTIC_COLUMNS[1],
        DIAGNOSTIC_COLUMNS[2],
        DIAGNOSTIC_COLUMNS[3],
        DIAGNOSTIC_COLUMNS[4],
        DIAGNOSTIC_COLUMNS[5],
    );
    for d in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.4}  {:>7.3}  {:>9.4}  {:>9.4}  {:>9.2}s",
            d.method, d.rmspe, d.cov90, d.is90, d.crps, d.run_time
        );
    }
    s
}
