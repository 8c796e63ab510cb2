//! Synthetic data from a known spatial random effects model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::basis::BasisSet;
use crate::covariance::{k_matrix, psd_factor};
use crate::data::{Location, SpatialDataset};
use crate::engine::SreParams;
use crate::error::{FrkError, Result};
use crate::noise::share_by_site;

/// `n` points uniform on the box `[lower, upper]`.
pub fn uniform_locations(lower: &[f64], upper: &[f64], n: usize, rng: &mut impl Rng) -> Result<Vec<Location>> {
    if lower.len() != upper.len() || lower.is_empty() || lower.iter().zip(upper).any(|(a, b)| !(a < b)) {
        return Err(FrkError::InvalidParameter("domain box must have lower < upper on every axis".into()));
    }
    (0..n)
        .map(|_| Location::new(lower.iter().zip(upper).map(|(a, b)| rng.random_range(*a..*b)).collect()))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SreSimulation {
    /// Observations `Z = Y + ε`.
    pub data: SpatialDataset,
    /// The hidden process `Y = Xβ + Φα + δ` at the same rows.
    pub truth: DVector<f64>,
    pub alpha: DVector<f64>,
}

/// Draws `α ~ Gau(0, K)`, then `δ` once per distinct site and `ε` per row.
pub fn simulate_sre(
    basis: &BasisSet,
    params: &SreParams,
    locations: Vec<Location>,
    covariates: Option<DMatrix<f64>>,
    seed: u64,
) -> Result<SreSimulation> {
    let n = locations.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normals = |k: usize| DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let k = k_matrix(&params.k_model, basis)?;
    let alpha = psd_factor(&k)? * normals(basis.len());
    let phi = basis.design_at(&locations)?;
    let mean = match &covariates {
        Some(x) if x.ncols() == params.beta.len() && x.nrows() == n => x * &params.beta,
        None if params.beta.is_empty() => DVector::zeros(n),
        _ => return Err(FrkError::Dimension("covariates do not match beta".into())),
    };
    let delta = share_by_site(&locations, normals(n) * params.noise.sigma2_delta.sqrt());
    let eps = normals(n) * params.noise.sigma2_eps.sqrt();
    let truth = mean + phi.mul_vec(&alpha) + delta;
    let z = &truth + eps;
    Ok(SreSimulation {
        data: SpatialDataset::new(locations, z, covariates)?,
        truth,
        alpha,
    })
}
