//! Dynamic spatio-temporal model
//!
//! `α₁ ~ Gau(m₀, P₀)`, `α_t = Mα_{t−1} + ω_t` with `ω_t ~ Gau(0, C_ω)`,
//! `Z_t = X_tβ + Φ_tα_t + δ_t + ε_t`. The nugget is folded into the
//! observation noise, so each measurement update conditions on
//! `Gau(Φ_tα_t, (σ²_δ + σ²_ε)I)`.
//!
//! Also the descriptive pathway: tensor-product space-time bases handled by
//! the spatial engine over the product domain.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{design_matrix, BasisSet};
use crate::covariance::{psd_check, psd_factor, NoiseParams};
use crate::data::{Location, SpatialDataset, StDataset};
use crate::engine::{check_level, chol, predict, FittedSolve, PredictiveResult, SreParams, Targets};
use crate::error::{FrkError, Result};
use crate::noise::{share_by_site, NoiseCov};

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicStModel {
    pub basis: BasisSet,
    /// Propagator.
    pub m: DMatrix<f64>,
    pub c_omega: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
    pub noise: NoiseParams,
    /// Shared across times; empty when slices carry no covariates.
    pub beta: DVector<f64>,
}

impl DynamicStModel {
    pub fn validate(&self) -> Result<()> {
        let r = self.basis.len();
        for (name, mat) in [("M", &self.m), ("C_omega", &self.c_omega), ("P0", &self.p0)] {
            if mat.shape() != (r, r) {
                return Err(FrkError::Dimension(format!(
                    "{name} is {}x{}, basis has {r} functions",
                    mat.nrows(),
                    mat.ncols()
                )));
            }
        }
        if self.m0.len() != r {
            return Err(FrkError::Dimension(format!("m0 has {} entries, expected {r}", self.m0.len())));
        }
        for (name, mat) in [("C_omega", &self.c_omega), ("P0", &self.p0)] {
            if !psd_check(mat)?.is_psd {
                return Err(FrkError::InvalidParameter(format!("{name} is not positive semidefinite")));
            }
        }
        self.noise.validate()
    }

    fn check_data(&self, data: &StDataset) -> Result<()> {
        self.validate()?;
        for ds in data.slices().iter().flatten() {
            if ds.p() != self.beta.len() {
                return Err(FrkError::Dimension(format!(
                    "slice has {} covariates, beta has {}",
                    ds.p(),
                    self.beta.len()
                )));
            }
        }
        Ok(())
    }

    fn propagate(&self, mean: &DVector<f64>, cov: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let p = &self.m * cov * self.m.transpose() + &self.c_omega;
        (&self.m * mean, symmetrize(p))
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Per-time state moments, `t = 1..T` stored at index `t − 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateTrajectory {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl StateTrajectory {
    pub fn t_len(&self) -> usize {
        self.means.len()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| FrkError::Schema(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| FrkError::io(path, e))
    }
}

/// Simulates states and data. `locations[t−1]` lists observation sites at
/// time `t` (empty for an unobserved slice); `covariates`, when given,
/// supplies one matrix per time.
pub fn simulate_dynamic(
    model: &DynamicStModel,
    locations: &[Vec<Location>],
    covariates: Option<&[DMatrix<f64>]>,
    seed: u64,
) -> Result<(StDataset, Vec<DVector<f64>>)> {
    model.validate()?;
    if locations.is_empty() {
        return Err(FrkError::Dimension("need at least one time".into()));
    }
    if let Some(x) = covariates {
        if x.len() != locations.len() {
            return Err(FrkError::Dimension("one covariate matrix per time required".into()));
        }
    } else if !model.beta.is_empty() {
        return Err(FrkError::Dimension("model has fixed effects but no covariates were given".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = model.basis.len();
    let normals = |k: usize, rng: &mut ChaCha8Rng| DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
    let f0 = psd_factor(&model.p0)?;
    let fw = psd_factor(&model.c_omega)?;
    let (sd_delta, sd_eps) = (model.noise.sigma2_delta.sqrt(), model.noise.sigma2_eps.sqrt());

    let mut states = Vec::with_capacity(locations.len());
    let mut slices = Vec::with_capacity(locations.len());
    for (t, locs) in locations.iter().enumerate() {
        let alpha = if t == 0 {
            &model.m0 + &f0 * normals(r, &mut rng)
        } else {
            &model.m * &states[t - 1] + &fw * normals(r, &mut rng)
        };
        if locs.is_empty() {
            slices.push(None);
        } else {
            let phi = model.basis.design_at(locs)?;
            let x = covariates.map(|c| c[t].clone());
            let mean = match &x {
                Some(x) if !model.beta.is_empty() => x * &model.beta,
                _ => DVector::zeros(locs.len()),
            };
            let delta = share_by_site(locs, normals(locs.len(), &mut rng) * sd_delta);
            let eps = normals(locs.len(), &mut rng) * sd_eps;
            let z = mean + phi.mul_vec(&alpha) + delta + eps;
            slices.push(Some(SpatialDataset::new(locs.clone(), z, x)?));
        }
        states.push(alpha);
    }
    Ok((StDataset::new(slices)?, states))
}

struct FilterPass {
    predicted: StateTrajectory,
    filtered: StateTrajectory,
}

fn filter_pass(model: &DynamicStModel, data: &StDataset) -> Result<FilterPass> {
    model.check_data(data)?;
    let t_len = data.t_len();
    let mut pred = StateTrajectory {
        means: Vec::with_capacity(t_len),
        covs: Vec::with_capacity(t_len),
    };
    let mut filt = pred.clone();
    for t in 0..t_len {
        let (mp, pp) = if t == 0 {
            (model.m0.clone(), model.p0.clone())
        } else {
            model.propagate(&filt.means[t - 1], &filt.covs[t - 1])
        };
        let (mf, pf) = match &data.slices()[t] {
            None => (mp.clone(), pp.clone()),
            Some(ds) => {
                let phi = design_matrix(&model.basis, ds)?;
                let innov = ds.z() - ds.fixed_effect(&model.beta)? - phi.mul_vec(&mp);
                let solve = FittedSolve::new(phi, &pp, NoiseCov::at_sites(ds.locations(), &model.noise)?)?;
                (&mp + solve.alpha_mean(&innov), solve.alpha_cov())
            }
        };
        pred.means.push(mp);
        pred.covs.push(pp);
        filt.means.push(mf);
        filt.covs.push(pf);
    }
    Ok(FilterPass {
        predicted: pred,
        filtered: filt,
    })
}

/// Forward recursion: moments of `α_t` given `Z_1..Z_t`.
pub fn kalman_filter(model: &DynamicStModel, data: &StDataset) -> Result<StateTrajectory> {
    Ok(filter_pass(model, data)?.filtered)
}

/// `(P_pred)⁻¹ B`, with a pseudo-inverse fallback for singular `P_pred`.
fn solve_psd(p: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = chol(p.clone()) {
        return Ok(c.solve(b));
    }
    let scale = p.amax().max(f64::MIN_POSITIVE);
    let pinv = p
        .clone()
        .pseudo_inverse(1e-12 * scale)
        .map_err(|e| FrkError::Singular(format!("predicted state covariance: {e}")))?;
    Ok(pinv * b)
}

/// Backward recursion: moments of `α_t` given `Z_1..Z_T`.
pub fn kalman_smoother(model: &DynamicStModel, data: &StDataset) -> Result<StateTrajectory> {
    let FilterPass { predicted, filtered } = filter_pass(model, data)?;
    let t_len = data.t_len();
    let mut means = filtered.means.clone();
    let mut covs = filtered.covs.clone();
    for t in (0..t_len.saturating_sub(1)).rev() {
        // J = P_f Mᵀ P_pred⁻¹
        let j = solve_psd(&predicted.covs[t + 1], &(&model.m * &filtered.covs[t]))?.transpose();
        means[t] = &filtered.means[t] + &j * (&means[t + 1] - &predicted.means[t + 1]);
        covs[t] = symmetrize(&filtered.covs[t] + &j * (&covs[t + 1] - &predicted.covs[t + 1]) * j.transpose());
    }
    Ok(StateTrajectory { means, covs })
}

/// A prediction target in space and (1-based) time.
#[derive(Debug, Clone, PartialEq)]
pub struct StTarget {
    pub location: Location,
    pub t: usize,
    pub covariates: Option<DVector<f64>>,
}

impl StTarget {
    pub fn new(location: Location, t: usize) -> Self {
        StTarget {
            location,
            t,
            covariates: None,
        }
    }
}

/// Predicts `Y(s, t)` from a (usually smoothed) trajectory; times beyond the
/// trajectory are forecast by propagating its last moments.
pub fn predict_st(
    model: &DynamicStModel,
    trajectory: &StateTrajectory,
    targets: &[StTarget],
    level: f64,
) -> Result<Vec<PredictiveResult>> {
    model.validate()?;
    check_level(level)?;
    let t_len = trajectory.t_len();
    if t_len == 0 {
        return Err(FrkError::Dimension("empty trajectory".into()));
    }
    let horizon = targets.iter().map(|t| t.t).max().unwrap_or(0);
    let mut means = trajectory.means.clone();
    let mut covs = trajectory.covs.clone();
    while means.len() < horizon {
        let (m, p) = model.propagate(means.last().expect("nonempty"), covs.last().expect("nonempty"));
        means.push(m);
        covs.push(p);
    }
    targets
        .iter()
        .map(|tg| {
            if tg.t == 0 {
                return Err(FrkError::InvalidParameter("time index must be at least 1".into()));
            }
            let phi = model.basis.eval(&tg.location)?;
            let fixed = match (&tg.covariates, model.beta.len()) {
                (_, 0) => 0.0,
                (Some(x), p) if x.len() == p => x.dot(&model.beta),
                _ => return Err(FrkError::Dimension("target covariates do not match beta".into())),
            };
            let (m, p) = (&means[tg.t - 1], &covs[tg.t - 1]);
            let var = phi.dot(&(p * &phi)) + model.noise.sigma2_delta;
            Ok(PredictiveResult::gaussian(tg.location.clone(), fixed + phi.dot(m), var, level))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthDiagnostics {
    pub is_normal: bool,
    /// Largest squared singular value: the worst one-step energy growth.
    pub max_amplification: f64,
}

pub fn transient_growth_diag(m: &DMatrix<f64>) -> Result<GrowthDiagnostics> {
    if !m.is_square() {
        return Err(FrkError::Dimension(format!("M is {}x{}", m.nrows(), m.ncols())));
    }
    let commutator = m.transpose() * m - m * m.transpose();
    let norm = m.norm();
    let smax = m.singular_values().max();
    Ok(GrowthDiagnostics {
        is_normal: commutator.norm() <= 1e-10 * norm * norm,
        max_amplification: smax * smax,
    })
}

/// Flattens `(s, t)` observations into one dataset over the product domain,
/// appending `t` as the last coordinate.
pub fn flatten_st(data: &StDataset) -> Result<SpatialDataset> {
    let mut locs = Vec::new();
    let mut z = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut p = None;
    for (t, ds) in data.slices().iter().enumerate() {
        let Some(ds) = ds else { continue };
        if *p.get_or_insert(ds.p()) != ds.p() {
            return Err(FrkError::Dimension("slices disagree on covariates".into()));
        }
        for (i, l) in ds.locations().iter().enumerate() {
            locs.push(l.with_extra((t + 1) as f64)?);
            z.push(ds.z()[i]);
            if let Some(x) = ds.covariates() {
                rows.push(x.row(i).iter().copied().collect());
            }
        }
    }
    if locs.is_empty() {
        return Err(FrkError::InvalidParameter("no observations in any slice".into()));
    }
    let x = match p {
        Some(p) if p > 0 => Some(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j])),
        _ => None,
    };
    SpatialDataset::new(locs, DVector::from_vec(z), x)
}

/// Spatial-engine prediction with a space-time basis from
/// [`crate::basis::tensor_st_basis`].
pub fn descriptive_st_predict(
    st_basis: &BasisSet,
    params: &SreParams,
    data: &StDataset,
    targets: &[StTarget],
    level: f64,
) -> Result<Vec<PredictiveResult>> {
    let flat = flatten_st(data)?;
    let locs = targets
        .iter()
        .map(|t| {
            if t.t == 0 {
                Err(FrkError::InvalidParameter("time index must be at least 1".into()))
            } else {
                t.location.with_extra(t.t as f64)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let tg = if params.beta.is_empty() {
        Targets::new(locs)
    } else {
        let p = params.beta.len();
        let x = DMatrix::from_fn(targets.len(), p, |i, j| {
            targets[i].covariates.as_ref().map_or(f64::NAN, |c| c.get(j).copied().unwrap_or(f64::NAN))
        });
        if x.iter().any(|v| v.is_nan()) {
            return Err(FrkError::Dimension("targets need covariates matching beta".into()));
        }
        Targets::with_covariates(locs, x)?
    };
    predict(&flat, st_basis, params, &tg, level)
}
