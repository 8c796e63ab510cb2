//! Maximum-likelihood fitting of [`SreParams`] by expectation-maximization.
//!
//! The complete data are `(Z, α)` (merged nugget) or `(Z, α, δ)` (separate
//! nugget). Each M-step maximizes the expected complete-data log-likelihood
//! `q(θ | θ_old)` exactly in the free parameters:
//!
//! * `β ← (XᵀX)⁻¹Xᵀ(Z − Φμ_α − μ_δ)`
//! * merged: `σ²_ξ ← n⁻¹[‖Z − Xβ − Φμ_α‖² + tr(ΦᵀΦΣ_α)]`
//! * separate: `σ²_ε ← n⁻¹[‖Z − Xβ − Φμ_α − μ_δ‖² + Σ var(εᵢ|Z)]`,
//!   `σ²_δ ← m⁻¹Σ_g(μ_δg² + var(δ_g|Z))` over the `m` distinct sites
//!
//! Rows at a repeated site share one `δ`, so the merged noise covariance is
//! not a multiple of `I` there. Then `β` is the GLS solution and a single
//! free noise variance is found by a one-dimensional search, alternating the
//! two until they settle.
//! * `K ← S = Σ_α + μ_αμ_αᵀ` (unstructured), `tr(S)/r · I` (scaled identity),
//!   or `σ²R(θ)` with `σ² = tr(R⁻¹S)/r` and `θ` chosen by a bounded
//!   one-dimensional search over the profiled objective.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, BasisSet};
use crate::covariance::{ar1_structure, exp_structure, k_matrix, KModel, NoiseParams};
use crate::data::{euclid, SpatialDataset};
use crate::design::DesignMatrix;
use crate::engine::{chol, FittedSolve, SreParams};
use crate::error::{FrkError, Result};
use crate::noise::{group_rows, NoiseCov};

/// How the two white-noise components are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Only `σ²_ξ = σ²_δ + σ²_ε` is updated; the δ share of `σ²_ξ` stays at its
    /// initial value when both are free.
    #[default]
    Merged,
    /// `δ` is treated as latent and `σ²_δ`, `σ²_ε` are updated separately.
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitRule {
    /// OLS for `β`, residual projection for the scale of `K`, half the residual
    /// variance for each free noise component.
    #[default]
    Moments,
    /// Start from the supplied parameters unchanged.
    Given,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreeParams {
    pub beta: bool,
    pub k: bool,
    pub delta: bool,
    pub eps: bool,
}

impl Default for FreeParams {
    fn default() -> Self {
        FreeParams {
            beta: true,
            k: true,
            delta: true,
            eps: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iter: usize,
    pub loglik_tol: f64,
    pub param_tol: f64,
    pub init: InitRule,
    pub free: FreeParams,
    pub noise_mode: NoiseMode,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 200,
            loglik_tol: 1e-6,
            param_tol: 1e-5,
            init: InitRule::Moments,
            free: FreeParams::default(),
            noise_mode: NoiseMode::Merged,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.loglik_tol > 0.0 && self.param_tol > 0.0) {
            return Err(FrkError::Config(format!(
                "EM tolerances must be positive: loglik {}, param {}",
                self.loglik_tol, self.param_tol
            )));
        }
        if self.max_iter == 0 {
            return Err(FrkError::Config("EM needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Allowed decrease of the log-likelihood between iterations.
pub const MONOTONE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    LoglikTolerance,
    ParameterTolerance,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: SreParams,
    /// Log-likelihood at the initial value followed by one entry per iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub termination: TerminationReason,
    /// Names of parameters that were held at the positivity floor.
    pub clamped: Vec<String>,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace holds the initial value")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| FrkError::Schema(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| FrkError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FrkError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| FrkError::Schema(format!("{}: {e}", path.display())))
    }
}

/// Conditional moments of the latent variables given `Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub alpha_mean: DVector<f64>,
    pub alpha_cov: DMatrix<f64>,
    /// `E(δ(sᵢ) | Z)`, repeated for rows at the same site.
    pub delta_mean: DVector<f64>,
    /// `var(δ(sᵢ) | Z)`.
    pub delta_var: DVector<f64>,
    /// `var(εᵢ | Z)`.
    pub eps_var: DVector<f64>,
}

fn residual(ds: &SpatialDataset, beta: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(ds.z() - ds.fixed_effect(beta)?)
}

fn build_solve(ds: &SpatialDataset, phi: &DesignMatrix, basis: &BasisSet, params: &SreParams) -> Result<FittedSolve> {
    let k = k_matrix(&params.k_model, basis)?;
    FittedSolve::new(phi.clone(), &k, NoiseCov::at_sites(ds.locations(), &params.noise)?)
}

/// Rows grouped by exact site.
fn site_groups(ds: &SpatialDataset) -> Vec<Vec<usize>> {
    let keys: Vec<Vec<u64>> = ds.locations().iter().map(|l| l.exact_key()).collect();
    group_rows(&keys)
}

fn moments_from(
    solve: &FittedSolve,
    resid: &DVector<f64>,
    noise: &NoiseParams,
    sites: Option<&[Vec<usize>]>,
) -> Moments {
    let n = resid.len();
    let alpha_mean = solve.alpha_mean(resid);
    let alpha_cov = solve.alpha_cov();
    let Some(sites) = sites else {
        return Moments {
            alpha_mean,
            alpha_cov,
            delta_mean: DVector::zeros(0),
            delta_var: DVector::zeros(0),
            eps_var: DVector::zeros(0),
        };
    };
    let w = solve.apply_inverse(resid);
    let d = solve.inverse_diag();
    let (sd, se) = (noise.sigma2_delta, noise.sigma2_eps);
    let mut delta_mean = DVector::zeros(n);
    let mut delta_var = DVector::zeros(n);
    for rows in sites {
        let (mean, quad) = if rows.len() == 1 {
            (w[rows[0]], d[rows[0]])
        } else {
            let ones: Vec<(usize, f64)> = rows.iter().map(|&i| (i, 1.0)).collect();
            (rows.iter().map(|&i| w[i]).sum(), solve.quad_inverse_sparse(&ones))
        };
        for &i in rows {
            delta_mean[i] = sd * mean;
            delta_var[i] = (sd - sd * sd * quad).max(0.0);
        }
    }
    Moments {
        alpha_mean,
        alpha_cov,
        delta_mean,
        delta_var,
        eps_var: DVector::from_iterator(n, d.iter().map(|di| (se - se * se * di).max(0.0))),
    }
}

/// Exact Gaussian conditional moments of `α`, `δ` and `ε` given `Z`.
pub fn e_step(ds: &SpatialDataset, basis: &BasisSet, params: &SreParams) -> Result<Moments> {
    let phi = design_matrix(basis, ds)?;
    if params.beta.len() != ds.p() {
        return Err(FrkError::Dimension(format!("beta has {} entries, data {}", params.beta.len(), ds.p())));
    }
    let solve = build_solve(ds, &phi, basis, params)?;
    let sites = site_groups(ds);
    Ok(moments_from(&solve, &residual(ds, &params.beta)?, &params.noise, Some(&sites)))
}

fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let xtx = x.tr_mul(x);
    let c = chol(xtx).ok_or_else(|| FrkError::Singular("covariate matrix is rank deficient".into()))?;
    Ok(c.solve(&x.tr_mul(y)))
}

/// `(XᵀN⁻¹X)⁻¹XᵀN⁻¹y`.
fn gls(x: &DMatrix<f64>, y: &DVector<f64>, n: &NoiseCov) -> Result<DVector<f64>> {
    let mut nx = x.clone();
    for j in 0..x.ncols() {
        let c = n.solve(&x.column(j).into_owned());
        nx.set_column(j, &c);
    }
    let c = chol(nx.tr_mul(x)).ok_or_else(|| FrkError::Singular("covariate matrix is rank deficient".into()))?;
    Ok(c.solve(&nx.tr_mul(y)))
}

fn variance_floor(ds: &SpatialDataset) -> Result<f64> {
    let z = ds.z();
    let n = z.len() as f64;
    let mean = z.mean();
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1.0);
    if !(var > 0.0) {
        return Err(FrkError::InvalidParameter("response has zero variance".into()));
    }
    Ok(1e-12 * var)
}

/// `log|R|` and `R⁻¹` applied to `S` as `tr(R⁻¹S)`, or `None` if `R` is not
/// positive definite.
fn logdet_and_trace(r: &DMatrix<f64>, s: &DMatrix<f64>) -> Option<(f64, f64)> {
    let c = chol(r.clone())?;
    let logdet = 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let tr = c.solve(s).trace();
    Some((logdet, tr))
}

/// Profiled `−2q_K(θ)/r` up to constants: `log(tr(R⁻¹S)/r) + log|R|/r`.
fn profile_objective(r: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    let dim = r.nrows() as f64;
    match logdet_and_trace(r, s) {
        Some((ld, tr)) if tr > 0.0 && ld.is_finite() => (tr / dim).ln() + ld / dim,
        _ => f64::INFINITY,
    }
}

fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

fn center_distance_range(basis: &BasisSet) -> Option<(f64, f64)> {
    let centers: Vec<Vec<f64>> = basis.functions().iter().map(|f| f.center()).collect::<Option<_>>()?;
    let (mut lo, mut hi) = (f64::INFINITY, 0f64);
    for block in basis.resolution_blocks() {
        for i in block.clone() {
            for j in block.start..i {
                let d = euclid(&centers[i], &centers[j]);
                if d > 0.0 {
                    lo = lo.min(d);
                    hi = hi.max(d);
                }
            }
        }
    }
    (hi > 0.0).then_some((lo, hi))
}

fn update_k(model: &KModel, basis: &BasisSet, s: &DMatrix<f64>, floor: f64, clamped: &mut Vec<String>) -> Result<KModel> {
    let r = basis.len();
    let scale = |v: f64, clamped: &mut Vec<String>| {
        if v < floor {
            clamped.push("k_variance".into());
            floor
        } else {
            v
        }
    };
    let updated = match *model {
        KModel::Unstructured { .. } => KModel::Unstructured {
            k: (s + s.transpose()) * 0.5,
        },
        KModel::ScaledIdentity { .. } => KModel::ScaledIdentity {
            variance: scale(s.trace() / r as f64, clamped),
        },
        KModel::Ar1PerResolution { rho, .. } => {
            let obj = |x: f64| profile_objective(&ar1_structure(basis, x), s);
            let (cand, f_cand) = golden_min(obj, -0.999, 0.999);
            let rho = if f_cand < obj(rho) { cand } else { rho };
            let (_, tr) = logdet_and_trace(&ar1_structure(basis, rho), s)
                .ok_or_else(|| FrkError::Singular(format!("AR(1) structure singular at rho = {rho}")))?;
            KModel::Ar1PerResolution {
                variance: scale(tr / r as f64, clamped),
                rho,
            }
        }
        KModel::ExpCentroid { length_scale, .. } => {
            let structure = |ls: f64| exp_structure(basis, ls);
            let mut ls = length_scale;
            if let Some((lo, hi)) = center_distance_range(basis) {
                let obj = |x: f64| structure(x.exp()).map_or(f64::INFINITY, |m| profile_objective(&m, s));
                let (cand, f_cand) = golden_min(obj, (lo / 10.0).ln(), (hi * 10.0).ln());
                if f_cand < obj(ls.ln()) {
                    ls = cand.exp();
                }
            }
            let (_, tr) = logdet_and_trace(&structure(ls)?, s)
                .ok_or_else(|| FrkError::Singular(format!("centroid structure singular at length scale {ls}")))?;
            KModel::ExpCentroid {
                variance: scale(tr / r as f64, clamped),
                length_scale: ls,
            }
        }
    };
    Ok(updated)
}

struct MStep {
    params: SreParams,
    clamped: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn m_step_inner(
    ds: &SpatialDataset,
    phi: &DesignMatrix,
    basis: &BasisSet,
    sites: &[Vec<usize>],
    mo: &Moments,
    current: &SreParams,
    config: &EmConfig,
    floor: f64,
) -> Result<MStep> {
    let n = ds.len();
    let nf = n as f64;
    let free = config.free;
    let separate = config.noise_mode == NoiseMode::Separate;
    if mo.alpha_mean.len() != basis.len() || (separate && mo.delta_mean.len() != n) {
        return Err(FrkError::Dimension("moments do not match data shapes".into()));
    }
    let mut clamped = Vec::new();
    let mut floored = |name: &str, v: f64| {
        if v < floor {
            clamped.push(name.to_string());
            floor
        } else {
            v
        }
    };

    let phi_mu = phi.mul_vec(&mo.alpha_mean);
    let mut target = ds.z() - &phi_mu;
    if separate {
        target -= &mo.delta_mean;
    }
    let fit_beta = |n: Option<&NoiseCov>| -> Result<DVector<f64>> {
        match (free.beta, ds.covariates()) {
            (true, Some(x)) => match n {
                Some(n) => gls(x, &target, n),
                None => ols(x, &target),
            },
            _ => Ok(current.beta.clone()),
        }
    };
    let repeated = sites.iter().any(|g| g.len() > 1);
    let old = current.noise;
    let mut noise = old;
    let beta;
    if separate {
        beta = fit_beta(None)?;
        let rss = (&target - ds.fixed_effect(&beta)?).norm_squared();
        if free.eps {
            noise.sigma2_eps = floored("sigma2_eps", (rss + mo.eps_var.sum()) / nf);
        }
        if free.delta {
            let m2: f64 = sites
                .iter()
                .map(|g| mo.delta_mean[g[0]].powi(2) + mo.delta_var[g[0]])
                .sum();
            noise.sigma2_delta = floored("sigma2_delta", m2 / sites.len() as f64);
        }
    } else if !repeated || !(free.delta || free.eps) {
        beta = fit_beta(None)?;
        if free.delta || free.eps {
            let rss = (&target - ds.fixed_effect(&beta)?).norm_squared();
            let spread = (phi.weighted_gram(&DVector::from_element(n, 1.0)) * &mo.alpha_cov).trace();
            let xi_hat = (rss + spread) / nf;
            match (free.delta, free.eps) {
                (true, true) => {
                    let share = old.sigma2_delta / old.xi();
                    let xi = floored("sigma2_xi", xi_hat);
                    noise.sigma2_delta = share * xi;
                    noise.sigma2_eps = (1.0 - share) * xi;
                }
                (false, true) => noise.sigma2_eps = floored("sigma2_eps", xi_hat - old.sigma2_delta),
                _ => noise.sigma2_delta = floored("sigma2_delta", xi_hat - old.sigma2_eps),
            }
        }
    } else if free.delta && free.eps {
        // N = ξ·N₀ with the δ share of N₀ held fixed
        let share = old.sigma2_delta / old.xi();
        let n0 = NoiseCov::at_sites(ds.locations(), &NoiseParams::new(share, 1.0 - share)?)?;
        beta = fit_beta(Some(&n0))?;
        let resid = &target - ds.fixed_effect(&beta)?;
        let spread = (n0.gram(phi) * &mo.alpha_cov).trace();
        let xi = floored("sigma2_xi", (n0.quad(&resid) + spread) / nf);
        noise.sigma2_delta = share * xi;
        noise.sigma2_eps = (1.0 - share) * xi;
    } else {
        let stats = SiteStats::new(phi, sites, &mo.alpha_cov);
        let name = if free.eps { "sigma2_eps" } else { "sigma2_delta" };
        let mut b = current.beta.clone();
        for _ in 0..200 {
            b = fit_beta(Some(&NoiseCov::at_sites(ds.locations(), &noise)?))?;
            let resid = &target - ds.fixed_effect(&b)?;
            let before = noise;
            let set = |v: f64| {
                if free.eps {
                    NoiseParams { sigma2_eps: v, ..old }
                } else {
                    NoiseParams { sigma2_delta: v, ..old }
                }
            };
            let obj = |v: f64| stats.objective(&resid, &set(v));
            let current_v = if free.eps { before.sigma2_eps } else { before.sigma2_delta };
            let v = search_variance(&obj, floor, current_v, stats.scale(&resid));
            noise = set(v);
            let settled = (v - current_v).abs() <= 1e-13 * v.max(floor);
            if settled || ds.covariates().is_none() || !free.beta {
                break;
            }
        }
        if (if free.eps { noise.sigma2_eps } else { noise.sigma2_delta }) <= floor {
            clamped.push(name.to_string());
        }
        beta = b;
    }

    let k_model = if free.k {
        let s = &mo.alpha_cov + &mo.alpha_mean * mo.alpha_mean.transpose();
        update_k(&current.k_model, basis, &s, floor, &mut clamped)?
    } else {
        current.k_model.clone()
    };
    Ok(MStep {
        params: SreParams::new(beta, k_model, noise)?,
        clamped,
    })
}

/// Per-site sufficient statistics for the merged noise term
/// `e = Z − Xβ − Φα` when rows repeat sites.
struct SiteStats<'a> {
    sites: &'a [Vec<usize>],
    /// `φᵢᵀΣ_αφᵢ` per row.
    row_spread: Vec<f64>,
    /// `(Σ_g φᵢ)ᵀΣ_α(Σ_g φᵢ)` per site.
    site_spread: Vec<f64>,
}

impl<'a> SiteStats<'a> {
    fn new(phi: &DesignMatrix, sites: &'a [Vec<usize>], cov: &DMatrix<f64>) -> Self {
        let quad = |v: &DVector<f64>| v.dot(&(cov * v));
        let row_spread = (0..phi.nrows()).map(|i| quad(&phi.row_dense(i))).collect();
        let site_spread = sites
            .iter()
            .map(|g| {
                let mut h = DVector::zeros(phi.ncols());
                for &i in g {
                    for (j, x) in phi.row(i) {
                        h[j] += x;
                    }
                }
                quad(&h)
            })
            .collect();
        SiteStats {
            sites,
            row_spread,
            site_spread,
        }
    }

    /// Typical size of `E eᵢ²`, used to bracket the search.
    fn scale(&self, resid: &DVector<f64>) -> f64 {
        let total: f64 = resid.iter().map(|r| r * r).sum::<f64>() + self.row_spread.iter().sum::<f64>();
        total / resid.len() as f64
    }

    /// `log|N| + tr(N⁻¹E[eeᵀ])`, i.e. `−2q` for the noise term.
    fn objective(&self, resid: &DVector<f64>, noise: &NoiseParams) -> f64 {
        let (sd, se) = (noise.sigma2_delta, noise.sigma2_eps);
        let mut total = 0.0;
        for (g, rows) in self.sites.iter().enumerate() {
            let s: f64 = rows.iter().map(|&i| resid[i] * resid[i] + self.row_spread[i]).sum();
            if rows.len() == 1 {
                total += (sd + se).ln() + s / (sd + se);
            } else {
                let k = rows.len() as f64;
                let sum: f64 = rows.iter().map(|&i| resid[i]).sum();
                let t = sum * sum + self.site_spread[g];
                let big = se + k * sd;
                total += (k - 1.0) * se.ln() + big.ln() + (s - sd * t / big) / se;
            }
        }
        if total.is_nan() {
            f64::INFINITY
        } else {
            total
        }
    }
}

/// Minimizer of `f` over `[floor, ∞)`: a log-spaced scan up to a multiple of
/// `scale`, refined by golden section around the best point. The current
/// value is kept unless the search improves on it.
fn search_variance(f: &impl Fn(f64) -> f64, floor: f64, current: f64, scale: f64) -> f64 {
    let (lo, hi) = (floor.ln(), (100.0 * scale.max(floor)).ln().max(floor.ln() + 1.0));
    let steps = 200;
    let grid = |i: usize| lo + (hi - lo) * i as f64 / steps as f64;
    let best = (0..=steps)
        .map(|i| (i, f(grid(i).exp())))
        .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
        .0;
    let (x, fx) = golden_min(|x| f(x.exp()), grid(best.saturating_sub(1)), grid((best + 1).min(steps)));
    let (x, fx) = if f(floor) < fx { (floor.ln(), f(floor)) } else { (x, fx) };
    if fx < f(current) {
        x.exp().max(floor)
    } else {
        current
    }
}

/// Maximizer of `q(θ | current)` over the free parameters given E-step moments.
pub fn m_step(
    ds: &SpatialDataset,
    basis: &BasisSet,
    moments: &Moments,
    current: &SreParams,
    config: &EmConfig,
) -> Result<SreParams> {
    let phi = design_matrix(basis, ds)?;
    let floor = variance_floor(ds)?;
    let sites = site_groups(ds);
    Ok(m_step_inner(ds, &phi, basis, &sites, moments, current, config, floor)?.params)
}

/// Method-of-moments starting values. Parameters that are not free, and the
/// correlation structure of `K`, are taken from `template`.
pub fn initialize(ds: &SpatialDataset, basis: &BasisSet, template: &SreParams, free: FreeParams) -> Result<SreParams> {
    let floor = variance_floor(ds)?;
    let n = ds.len() as f64;
    let beta = match (free.beta, ds.covariates()) {
        (true, Some(x)) => ols(x, ds.z())?,
        _ => template.beta.clone(),
    };
    let e = residual(ds, &beta)?;
    let e_mean = e.mean();
    let var_e = (e.iter().map(|v| (v - e_mean) * (v - e_mean)).sum::<f64>() / n).max(floor);

    let mut noise = template.noise;
    if free.delta {
        noise.sigma2_delta = 0.5 * var_e;
    }
    if free.eps {
        noise.sigma2_eps = 0.5 * var_e;
    }
    if noise.xi() <= 0.0 {
        noise.sigma2_eps = floor;
    }

    let k_model = if free.k {
        let phi = design_matrix(basis, ds)?;
        let gram = phi.weighted_gram(&DVector::from_element(ds.len(), 1.0));
        let r = basis.len();
        let ridge = 1e-6 * gram.trace().max(f64::MIN_POSITIVE) / r as f64;
        let a = match chol(&gram + DMatrix::identity(r, r) * ridge) {
            Some(c) => c.solve(&phi.tr_mul_vec(&e)),
            None => DVector::zeros(r),
        };
        let explained = phi.mul_vec(&a).norm_squared() / n;
        let unit = match &template.k_model {
            KModel::Unstructured { .. } => KModel::ScaledIdentity { variance: 1.0 },
            m => m.with_variance(1.0),
        };
        let mean_prior = (gram * k_matrix(&unit, basis)?).trace() / n;
        let variance = if mean_prior > 0.0 { (explained / mean_prior).max(floor) } else { floor };
        match template.k_model {
            KModel::Unstructured { .. } => KModel::Unstructured {
                k: DMatrix::identity(r, r) * variance,
            },
            ref m => m.with_variance(variance),
        }
    } else {
        template.k_model.clone()
    };
    SreParams::new(beta, k_model, noise)
}

fn param_vector(p: &SreParams) -> Vec<f64> {
    let mut v: Vec<f64> = p.beta.iter().copied().collect();
    match &p.k_model {
        KModel::Unstructured { k } => v.extend(k.iter().copied()),
        KModel::ScaledIdentity { variance } => v.push(*variance),
        KModel::Ar1PerResolution { variance, rho } => v.extend([*variance, *rho]),
        KModel::ExpCentroid {
            variance,
            length_scale,
        } => v.extend([*variance, *length_scale]),
    }
    v.extend([p.noise.sigma2_delta, p.noise.sigma2_eps]);
    v
}

fn relative_change(old: &SreParams, new: &SreParams) -> f64 {
    let (a, b) = (param_vector(old), param_vector(new));
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let size = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / size.max(f64::MIN_POSITIVE)
}

/// Runs EM from `init` (or from moment estimates, per `config.init`).
pub fn fit_em(ds: &SpatialDataset, basis: &BasisSet, init: SreParams, config: EmConfig) -> Result<FitResult> {
    config.validate()?;
    init.k_model.validate()?;
    init.noise.validate()?;
    if init.beta.len() != ds.p() {
        return Err(FrkError::Dimension(format!("beta has {} entries, data {}", init.beta.len(), ds.p())));
    }
    if config.noise_mode == NoiseMode::Separate && !(init.noise.sigma2_eps > 0.0) && !config.free.eps {
        return Err(FrkError::InvalidParameter("separate noise mode needs sigma2_eps > 0".into()));
    }
    let mut params = match config.init {
        InitRule::Moments => initialize(ds, basis, &init, config.free)?,
        InitRule::Given => init,
    };
    let phi = design_matrix(basis, ds)?;
    let floor = variance_floor(ds)?;
    let pointwise = config.noise_mode == NoiseMode::Separate;
    let sites = site_groups(ds);

    let mut solve = build_solve(ds, &phi, basis, &params)?;
    let mut resid = residual(ds, &params.beta)?;
    let mut ll = solve.log_density(&resid);
    if !ll.is_finite() {
        return Err(FrkError::Numeric(format!("initial log-likelihood is {ll}")));
    }
    let mut trace = vec![ll];
    let mut clamped: Vec<String> = Vec::new();
    let mut termination = TerminationReason::MaxIterations;
    let mut iterations = 0;

    for it in 1..=config.max_iter {
        let mo = moments_from(&solve, &resid, &params.noise, pointwise.then_some(sites.as_slice()));
        let step = m_step_inner(ds, &phi, basis, &sites, &mo, &params, &config, floor)?;
        let next_solve = build_solve(ds, &phi, basis, &step.params)?;
        let next_resid = residual(ds, &step.params.beta)?;
        let next_ll = next_solve.log_density(&next_resid);
        if !next_ll.is_finite() {
            return Err(FrkError::Numeric(format!("log-likelihood is {next_ll} at iteration {it}")));
        }
        if next_ll < ll - MONOTONE_SLACK {
            return Err(FrkError::NonMonotone {
                iteration: it,
                previous: ll,
                current: next_ll,
            });
        }
        for c in step.clamped {
            if !clamped.contains(&c) {
                clamped.push(c);
            }
        }
        let change = relative_change(&params, &step.params);
        let ll_change = (next_ll - ll).abs() / ll.abs().max(1.0);
        trace.push(next_ll);
        iterations = it;
        params = step.params;
        solve = next_solve;
        resid = next_resid;
        ll = next_ll;
        if ll_change <= config.loglik_tol {
            termination = TerminationReason::LoglikTolerance;
            break;
        }
        if change <= config.param_tol {
            termination = TerminationReason::ParameterTolerance;
            break;
        }
    }
    Ok(FitResult {
        params,
        loglik_trace: trace,
        iterations,
        converged: termination != TerminationReason::MaxIterations,
        termination,
        clamped,
    })
}
