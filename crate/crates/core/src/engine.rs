//! Exact Gaussian inference for the spatial random effects model
//!
//! `Z = Xβ + Φα + ξ`, `α ~ Gau(0, K)`, `ξ ~ Gau(0, C_ξ)` with `C_ξ` block
//! diagonal (see [`NoiseCov`]).
//!
//! `C_Z⁻¹ = C_ξ⁻¹ − C_ξ⁻¹ΦL(I + LᵀΦᵀC_ξ⁻¹ΦL)⁻¹LᵀΦᵀC_ξ⁻¹` with `K = LLᵀ`: the
//! r×r capacitance matrix is symmetric positive definite even when `K` is
//! singular, and `log|C_Z| = log|I + LᵀΦᵀC_ξ⁻¹ΦL| + log|C_ξ|`.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{design_matrix, BasisSet};
use crate::covariance::{k_matrix, matern, KModel, MaternParams, NoiseParams};
use crate::data::{euclid, Location, SpatialDataset};
use crate::design::DesignMatrix;
use crate::error::{FrkError, Result};
use crate::noise::NoiseCov;

/// Parameters `(β, K, σ²_δ, σ²_ε)` of the spatial mixed-effects model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SreParams {
    pub beta: DVector<f64>,
    pub k_model: KModel,
    pub noise: NoiseParams,
}

impl SreParams {
    pub fn new(beta: DVector<f64>, k_model: KModel, noise: NoiseParams) -> Result<Self> {
        k_model.validate()?;
        noise.validate()?;
        Ok(SreParams { beta, k_model, noise })
    }

    fn check(&self, ds: &SpatialDataset) -> Result<()> {
        self.k_model.validate()?;
        self.noise.validate()?;
        if self.beta.len() != ds.p() {
            return Err(FrkError::Dimension(format!(
                "beta has {} entries, dataset has {} covariates",
                self.beta.len(),
                ds.p()
            )));
        }
        Ok(())
    }
}

pub(crate) fn chol(m: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(m)
}

/// Factor `K = LLᵀ`. On failure, `1e−10·tr(K)/r` is added to the diagonal
/// (then grown tenfold up to six times). Returns the factor, the `K`
/// actually factored, and the jitter used.
pub(crate) fn factor_psd(k: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let r = k.nrows();
    if k.iter().all(|&v| v == 0.0) {
        return Ok((DMatrix::zeros(r, r), k.clone(), 0.0));
    }
    if let Some(c) = chol(k.clone()) {
        return Ok((c.l(), k.clone(), 0.0));
    }
    let trace = k.trace();
    if !(trace > 0.0) {
        return Err(FrkError::Singular("K has nonpositive trace".into()));
    }
    let base = 1e-10 * trace / r as f64;
    for step in 0..7 {
        let jitter = base * 10f64.powi(step);
        let kj = k + DMatrix::identity(r, r) * jitter;
        if let Some(c) = chol(kj.clone()) {
            return Ok((c.l(), kj, jitter));
        }
    }
    Err(FrkError::Singular("K is not positive semidefinite".into()))
}

/// Cached Sherman–Morrison–Woodbury work products for one `(Φ, K, C_ξ)`.
#[derive(Debug, Clone)]
pub struct FittedSolve {
    phi: DesignMatrix,
    noise: NoiseCov,
    k: DMatrix<f64>,
    l: DMatrix<f64>,
    gram: DMatrix<f64>,
    cap: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl FittedSolve {
    pub fn new(phi: DesignMatrix, k: &DMatrix<f64>, noise: NoiseCov) -> Result<Self> {
        let r = phi.ncols();
        if k.nrows() != r || k.ncols() != r {
            return Err(FrkError::Dimension(format!("K is {}x{}, design has {r} columns", k.nrows(), k.ncols())));
        }
        if noise.len() != phi.nrows() {
            return Err(FrkError::Dimension(format!(
                "{} noise variances for {} rows",
                noise.len(),
                phi.nrows()
            )));
        }
        let (l, k_used, jitter) = factor_psd(k)?;
        let gram = noise.gram(&phi);
        let mut cap = l.transpose() * &gram * &l;
        for i in 0..r {
            cap[(i, i)] += 1.0;
        }
        let cap = (&cap + cap.transpose()) * 0.5;
        let cap = chol(cap).ok_or_else(|| FrkError::Singular("capacitance matrix not positive definite".into()))?;
        Ok(FittedSolve {
            phi,
            noise,
            k: k_used,
            l,
            gram,
            cap,
            jitter,
        })
    }

    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    pub fn r(&self) -> usize {
        self.phi.ncols()
    }

    /// Diagonal jitter added to `K` (zero when none was needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn design(&self) -> &DesignMatrix {
        &self.phi
    }

    pub fn noise(&self) -> &NoiseCov {
        &self.noise
    }

    /// `ΦᵀC_ξ⁻¹Φ`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    fn cap_solve(&self, y: &DVector<f64>) -> DVector<f64> {
        self.cap.solve(y)
    }

    /// `‖chol(B)⁻¹ y‖²` = `yᵀB⁻¹y`.
    fn cap_quad(&self, y: &DVector<f64>) -> f64 {
        let lc = self.cap.l_dirty();
        let z = lc
            .lower_triangle()
            .solve_lower_triangular(y)
            .expect("capacitance factor has a positive diagonal");
        z.norm_squared()
    }

    /// `C_Z⁻¹ v` in `O(nnz(Φ)·r + r²)`.
    pub fn apply_inverse(&self, v: &DVector<f64>) -> DVector<f64> {
        let w = self.noise.solve(v);
        let y = self.l.tr_mul(&self.phi.tr_mul_vec(&w));
        let corr = self.phi.mul_vec(&(&self.l * self.cap_solve(&y)));
        w - self.noise.solve(&corr)
    }

    /// `vᵀC_Z⁻¹v`.
    pub fn quad_inverse(&self, v: &DVector<f64>) -> f64 {
        let w = self.noise.solve(v);
        let y = self.l.tr_mul(&self.phi.tr_mul_vec(&w));
        v.dot(&w) - self.cap_quad(&y)
    }

    /// `Lᵀ Φᵀ w` for a sparse `w`.
    fn project_sparse(&self, w: &[(usize, f64)]) -> DVector<f64> {
        let mut y = DVector::zeros(self.r());
        for &(i, x) in w {
            for (j, p) in self.phi.row(i) {
                y[j] += x * p;
            }
        }
        self.l.tr_mul(&y)
    }

    /// `uᵀC_Z⁻¹u` for a sparse `u`.
    pub fn quad_inverse_sparse(&self, u: &[(usize, f64)]) -> f64 {
        let w = self.noise.solve_sparse(u);
        let mut dense_u: HashMap<usize, f64> = HashMap::new();
        for &(i, x) in u {
            *dense_u.entry(i).or_default() += x;
        }
        let udu: f64 = w.iter().map(|(i, x)| dense_u.get(i).copied().unwrap_or(0.0) * x).sum();
        udu - self.cap_quad(&self.project_sparse(&w))
    }

    /// `log|C_Z|`.
    pub fn log_det(&self) -> f64 {
        let cap_logdet: f64 = 2.0 * self.cap.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        cap_logdet + self.noise.log_det()
    }

    /// Gaussian log density of a residual vector `Z − Xβ` under `Gau(0, C_Z)`.
    pub fn log_density(&self, resid: &DVector<f64>) -> f64 {
        let n = self.n() as f64;
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + self.log_det() + self.quad_inverse(resid))
    }

    /// `cov(α | Z) = L(I + LᵀΦᵀC_ξ⁻¹ΦL)⁻¹Lᵀ`.
    pub fn alpha_cov(&self) -> DMatrix<f64> {
        let s = &self.l * self.cap.solve(&self.l.transpose());
        (&s + s.transpose()) * 0.5
    }

    /// `E(α | Z)` for a residual `Z − Xβ`.
    pub fn alpha_mean(&self, resid: &DVector<f64>) -> DVector<f64> {
        let y = self.l.tr_mul(&self.phi.tr_mul_vec(&self.noise.solve(resid)));
        &self.l * self.cap_solve(&y)
    }

    /// Diagonal of `C_Z⁻¹`.
    pub fn inverse_diag(&self) -> DVector<f64> {
        let diag: Vec<f64> = (0..self.n())
            .into_par_iter()
            .map(|i| self.quad_inverse_sparse(&[(i, 1.0)]))
            .collect();
        DVector::from_vec(diag)
    }
}

/// `C_Z⁻¹ v` through the cached low-rank factorization.
pub fn smw_apply(solve: &FittedSolve, v: &DVector<f64>) -> Result<DVector<f64>> {
    if v.len() != solve.n() {
        return Err(FrkError::Dimension(format!("vector of length {} for n = {}", v.len(), solve.n())));
    }
    Ok(solve.apply_inverse(v))
}

/// Builds the solve for a dataset under the given parameters.
pub fn fitted_solve(ds: &SpatialDataset, basis: &BasisSet, params: &SreParams) -> Result<FittedSolve> {
    params.check(ds)?;
    let phi = design_matrix(basis, ds)?;
    let k = k_matrix(&params.k_model, basis)?;
    FittedSolve::new(phi, &k, NoiseCov::at_sites(ds.locations(), &params.noise)?)
}

/// Log of the `Gau(Xβ, C_Z)` density of `Z`.
pub fn log_likelihood(ds: &SpatialDataset, basis: &BasisSet, params: &SreParams) -> Result<f64> {
    let solve = fitted_solve(ds, basis, params)?;
    let resid = ds.z() - ds.fixed_effect(&params.beta)?;
    let ll = solve.log_density(&resid);
    if !ll.is_finite() {
        return Err(FrkError::Numeric(format!("log-likelihood is {ll}")));
    }
    Ok(ll)
}

/// Prediction locations and, when the model has fixed effects, their covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub locations: Vec<Location>,
    pub covariates: Option<DMatrix<f64>>,
}

impl Targets {
    pub fn new(locations: Vec<Location>) -> Self {
        Targets {
            locations,
            covariates: None,
        }
    }

    pub fn with_covariates(locations: Vec<Location>, covariates: DMatrix<f64>) -> Result<Self> {
        if covariates.nrows() != locations.len() {
            return Err(FrkError::Dimension(format!(
                "{} targets but {} covariate rows",
                locations.len(),
                covariates.nrows()
            )));
        }
        Ok(Targets {
            locations,
            covariates: Some(covariates),
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// `x(s₀)ᵀβ` for each target.
    pub(crate) fn fixed_effect(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        if beta.is_empty() {
            return Ok(DVector::zeros(self.len()));
        }
        match &self.covariates {
            Some(x) if x.ncols() == beta.len() => Ok(x * beta),
            Some(x) => Err(FrkError::Dimension(format!(
                "target covariates have {} columns, beta has {}",
                x.ncols(),
                beta.len()
            ))),
            None => Err(FrkError::Dimension("model has fixed effects but targets have no covariates".into())),
        }
    }
}

impl From<&SpatialDataset> for Targets {
    fn from(ds: &SpatialDataset) -> Self {
        Targets {
            locations: ds.locations().to_vec(),
            covariates: ds.covariates().cloned(),
        }
    }
}

/// Predictive mean, variance and central interval at one location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveResult {
    pub location: Location,
    pub mean: f64,
    pub variance: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

pub(crate) fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(FrkError::InvalidParameter(format!("interval level {level} outside (0,1)")))
    }
}

impl PredictiveResult {
    /// Gaussian central interval `mean ± z_{1−α/2}·√variance` at `level = 1 − α`.
    pub fn gaussian(location: Location, mean: f64, variance: f64, level: f64) -> Self {
        let variance = variance.max(0.0);
        let half = normal_quantile(0.5 + 0.5 * level) * variance.sqrt();
        PredictiveResult {
            location,
            mean,
            variance,
            lower: mean - half,
            upper: mean + half,
            level,
        }
    }

    pub fn std_error(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Conditioning state for repeated predictions: `C_Z⁻¹(Z − Xβ)` and an index
/// of data rows by `(group, exact coordinates)` for nugget matching.
#[derive(Debug, Clone)]
pub struct Predictor {
    solve: FittedSolve,
    weights: DVector<f64>,
    g: DVector<f64>,
    index: HashMap<(usize, Vec<u64>), Vec<usize>>,
}

impl Predictor {
    /// `groups[i]` labels which process row `i` observes; a target only
    /// shares fine-scale variation with rows of its own group.
    pub fn new(solve: FittedSolve, resid: &DVector<f64>, locations: &[&Location], groups: &[usize]) -> Result<Self> {
        if resid.len() != solve.n() || locations.len() != solve.n() || groups.len() != solve.n() {
            return Err(FrkError::Dimension("predictor inputs disagree on n".into()));
        }
        let weights = solve.apply_inverse(resid);
        let g = solve.k() * solve.design().tr_mul_vec(&weights);
        let mut index: HashMap<(usize, Vec<u64>), Vec<usize>> = HashMap::new();
        for (i, (loc, &grp)) in locations.iter().zip(groups).enumerate() {
            index.entry((grp, loc.exact_key())).or_default().push(i);
        }
        Ok(Predictor {
            solve,
            weights,
            g,
            index,
        })
    }

    pub fn solve(&self) -> &FittedSolve {
        &self.solve
    }

    /// Random-effect part of the predictive mean and the predictive variance
    /// of `φ₀ᵀα + δ(s₀)` where `var δ(s₀) = nugget`.
    pub fn predict_point(&self, phi0: &DVector<f64>, nugget: f64, group: usize, location: &Location) -> (f64, f64) {
        let s = &self.solve;
        let rows = self.index.get(&(group, location.exact_key()));
        let mut mean = phi0.dot(&self.g);
        let var = match rows {
            Some(rows) if nugget > 0.0 => {
                mean += nugget * rows.iter().map(|&i| self.weights[i]).sum::<f64>();
                // u = ΦKφ₀ + nugget·1_M; var = c(s₀) − uᵀC_Z⁻¹u, expanded through C_ξ⁻¹1_M
                let a = s.k() * phi0;
                let prior = phi0.dot(&a) + nugget;
                let ones: Vec<(usize, f64)> = rows.iter().map(|&i| (i, 1.0)).collect();
                let w = s.noise.solve_sparse(&ones);
                let mut phi_m = DVector::zeros(s.r());
                let (mut phi_a, mut m_quad) = (0.0, 0.0);
                for &(i, x) in &w {
                    if rows.contains(&i) {
                        m_quad += x;
                    }
                    for (j, p) in s.phi.row(i) {
                        phi_m[j] += x * p;
                        phi_a += x * p * a[j];
                    }
                }
                let u_dinv_u = a.dot(&(s.gram() * &a)) + 2.0 * nugget * phi_a + nugget * nugget * m_quad;
                let q = s.l.tr_mul(&(s.gram() * &a + phi_m * nugget));
                prior - (u_dinv_u - s.cap_quad(&q))
            }
            _ => {
                let y = s.l.tr_mul(phi0);
                s.cap_quad(&y) + nugget
            }
        };
        (mean, var.max(0.0))
    }
}

/// Predictive distribution of `Y(s₀)` given `Z` at each target.
pub fn predict(
    ds: &SpatialDataset,
    basis: &BasisSet,
    params: &SreParams,
    targets: &Targets,
    level: f64,
) -> Result<Vec<PredictiveResult>> {
    check_level(level)?;
    if targets.is_empty() {
        return Err(FrkError::InvalidParameter("no prediction targets".into()));
    }
    let fixed = targets.fixed_effect(&params.beta)?;
    let solve = fitted_solve(ds, basis, params)?;
    let resid = ds.z() - ds.fixed_effect(&params.beta)?;
    let locs: Vec<&Location> = ds.locations().iter().collect();
    let predictor = Predictor::new(solve, &resid, &locs, &vec![0; ds.len()])?;
    let nugget = params.noise.sigma2_delta;
    targets
        .locations
        .par_iter()
        .enumerate()
        .map(|(t, loc)| {
            let phi0 = basis.eval(loc)?;
            let (m, v) = predictor.predict_point(&phi0, nugget, 0, loc);
            Ok(PredictiveResult::gaussian(loc.clone(), fixed[t] + m, v, level))
        })
        .collect()
}

/// Same predictive distribution through a dense `n×n` Cholesky of `C_Z`.
/// Cubic in `n`; used for timing comparisons.
pub fn predict_dense(
    ds: &SpatialDataset,
    basis: &BasisSet,
    params: &SreParams,
    targets: &Targets,
    level: f64,
) -> Result<Vec<PredictiveResult>> {
    check_level(level)?;
    params.check(ds)?;
    let phi = design_matrix(basis, ds)?.to_dense();
    let k = k_matrix(&params.k_model, basis)?;
    let cz = &phi * &k * phi.transpose() + NoiseCov::at_sites(ds.locations(), &params.noise)?.to_dense();
    let c = chol(cz).ok_or_else(|| FrkError::Singular("dense C_Z not positive definite".into()))?;
    let resid = ds.z() - ds.fixed_effect(&params.beta)?;
    let w = c.solve(&resid);
    let fixed = targets.fixed_effect(&params.beta)?;
    let nugget = params.noise.sigma2_delta;
    targets
        .locations
        .iter()
        .enumerate()
        .map(|(t, loc)| {
            let phi0 = basis.eval(loc)?;
            let a = &k * &phi0;
            let mut c0 = &phi * &a;
            for (i, l) in ds.locations().iter().enumerate() {
                if l.exact_key() == loc.exact_key() {
                    c0[i] += nugget;
                }
            }
            let z = c.l().solve_lower_triangular(&c0).expect("positive diagonal");
            let var = phi0.dot(&a) + nugget - z.norm_squared();
            Ok(PredictiveResult::gaussian(loc.clone(), fixed[t] + c0.dot(&w), var, level))
        })
        .collect()
}

/// Default size guard for the dense Matérn baseline.
pub const BASELINE_MAX_N: usize = 20_000;

/// Simple kriging of a zero-mean residual process with a Matérn covariance
/// plus measurement error `σ²_ε`.
pub fn kriging_baseline(
    ds: &SpatialDataset,
    p: &MaternParams,
    sigma2_eps: f64,
    targets: &[Location],
    level: f64,
    max_n: usize,
) -> Result<Vec<PredictiveResult>> {
    check_level(level)?;
    let n = ds.len();
    if n > max_n {
        return Err(FrkError::InvalidParameter(format!(
            "dense kriging on n = {n} exceeds the size guard {max_n}"
        )));
    }
    if !(sigma2_eps >= 0.0) {
        return Err(FrkError::InvalidParameter(format!("sigma2_eps {sigma2_eps} negative")));
    }
    let locs = ds.locations();
    let mut cz = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let c = matern(euclid(locs[i].coords(), locs[j].coords()), p)?;
            cz[(i, j)] = c;
            cz[(j, i)] = c;
        }
        cz[(i, i)] += sigma2_eps;
    }
    let c = chol(cz).ok_or_else(|| FrkError::Singular("Matérn gram matrix not positive definite".into()))?;
    let w = c.solve(ds.z());
    let lower = c.l();
    targets
        .par_iter()
        .map(|t| {
            if t.dim() != ds.dim() {
                return Err(FrkError::Dimension(format!("target is {}-d, data {}-d", t.dim(), ds.dim())));
            }
            let c0 = DVector::from_iterator(
                n,
                locs.iter().map(|l| matern(euclid(l.coords(), t.coords()), p).unwrap_or(0.0)),
            );
            let z = lower.solve_lower_triangular(&c0).expect("positive diagonal");
            let var = p.variance - z.norm_squared();
            Ok(PredictiveResult::gaussian(t.clone(), c0.dot(&w), var, level))
        })
        .collect()
}
