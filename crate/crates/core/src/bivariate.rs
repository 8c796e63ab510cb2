//! Bivariate basis-function models built conditionally:
//! `α₁ ~ Gau(0, K₁₁)`, `α₂ | α₁ ~ Gau(Aα₁, K₂|₁)`.
//!
//! The joint coefficient covariance is then valid for any real `A`, and the
//! cross-covariance `C₁₂(s,u) = φ₁(s)ᵀK₁₁Aᵀφ₂(u)` need not be symmetric.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::basis::{design_matrix, BasisSet};
use crate::covariance::{psd_check, NoiseParams};
use crate::data::{Location, SpatialDataset};
use crate::design::DesignMatrix;
use crate::engine::{check_level, FittedSolve, PredictiveResult, Predictor};
use crate::error::{FrkError, Result};
use crate::noise::NoiseCov;

#[derive(Debug, Clone, PartialEq)]
pub struct BivariateModel {
    pub basis1: BasisSet,
    pub basis2: BasisSet,
    pub k11: DMatrix<f64>,
    /// r₂×r₁ regression of `α₂` on `α₁`.
    pub a: DMatrix<f64>,
    /// `K₂|₁`.
    pub k2_given_1: DMatrix<f64>,
    pub noise1: NoiseParams,
    pub noise2: NoiseParams,
}

impl BivariateModel {
    pub fn new(
        basis1: BasisSet,
        basis2: BasisSet,
        k11: DMatrix<f64>,
        a: DMatrix<f64>,
        k2_given_1: DMatrix<f64>,
        noise1: NoiseParams,
        noise2: NoiseParams,
    ) -> Result<Self> {
        let m = BivariateModel {
            basis1,
            basis2,
            k11,
            a,
            k2_given_1,
            noise1,
            noise2,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let (r1, r2) = (self.basis1.len(), self.basis2.len());
        let shape = |name: &str, m: &DMatrix<f64>, rows: usize, cols: usize| {
            if m.shape() != (rows, cols) {
                Err(FrkError::Dimension(format!(
                    "{name} is {}x{}, expected {rows}x{cols}",
                    m.nrows(),
                    m.ncols()
                )))
            } else {
                Ok(())
            }
        };
        shape("K11", &self.k11, r1, r1)?;
        shape("A", &self.a, r2, r1)?;
        shape("K2|1", &self.k2_given_1, r2, r2)?;
        for (name, m) in [("K11", &self.k11), ("K2|1", &self.k2_given_1)] {
            if !psd_check(m)?.is_psd {
                return Err(FrkError::InvalidParameter(format!("{name} is not positive semidefinite")));
            }
        }
        self.noise1.validate()?;
        self.noise2.validate()
    }

    fn noise(&self, process: usize) -> &NoiseParams {
        if process == 1 {
            &self.noise1
        } else {
            &self.noise2
        }
    }

    fn basis(&self, process: usize) -> &BasisSet {
        if process == 1 {
            &self.basis1
        } else {
            &self.basis2
        }
    }
}

/// Observations of each process; either side may be absent.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BivariateDataset {
    pub first: Option<SpatialDataset>,
    pub second: Option<SpatialDataset>,
}

impl BivariateDataset {
    pub fn new(first: Option<SpatialDataset>, second: Option<SpatialDataset>) -> Result<Self> {
        for ds in first.iter().chain(second.iter()) {
            if ds.covariates().is_some() {
                return Err(FrkError::InvalidParameter(
                    "bivariate processes are zero-mean; covariates are not supported".into(),
                ));
            }
        }
        Ok(BivariateDataset { first, second })
    }

    pub fn len(&self) -> usize {
        self.first.as_ref().map_or(0, |d| d.len()) + self.second.as_ref().map_or(0, |d| d.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_process(i: usize) -> Result<()> {
    if i == 1 || i == 2 {
        Ok(())
    } else {
        Err(FrkError::InvalidParameter(format!("process index {i} must be 1 or 2")))
    }
}

/// `K_ij = cov(α_i, α_j)`.
pub fn joint_block(m: &BivariateModel, i: usize, j: usize) -> Result<DMatrix<f64>> {
    check_process(i)?;
    check_process(j)?;
    Ok(match (i, j) {
        (1, 1) => m.k11.clone(),
        (1, 2) => &m.k11 * m.a.transpose(),
        (2, 1) => &m.a * &m.k11,
        _ => &m.k2_given_1 + &m.a * &m.k11 * m.a.transpose(),
    })
}

/// `[[K₁₁, K₁₁Aᵀ], [AK₁₁, K₂|₁ + AK₁₁Aᵀ]]`.
pub fn assemble_joint_k(m: &BivariateModel) -> Result<DMatrix<f64>> {
    m.validate()?;
    let (r1, r2) = (m.basis1.len(), m.basis2.len());
    let mut k = DMatrix::zeros(r1 + r2, r1 + r2);
    k.view_mut((0, 0), (r1, r1)).copy_from(&joint_block(m, 1, 1)?);
    k.view_mut((0, r1), (r1, r2)).copy_from(&joint_block(m, 1, 2)?);
    k.view_mut((r1, 0), (r2, r1)).copy_from(&joint_block(m, 2, 1)?);
    let k22 = joint_block(m, 2, 2)?;
    k.view_mut((r1, r1), (r2, r2)).copy_from(&((&k22 + k22.transpose()) * 0.5));
    Ok(k)
}

/// `φ_iᵀ K_ij φ_j` for explicit feature vectors.
pub fn cross_cov_features(phi_i: &DVector<f64>, k_ij: &DMatrix<f64>, phi_j: &DVector<f64>) -> Result<f64> {
    if k_ij.shape() != (phi_i.len(), phi_j.len()) {
        return Err(FrkError::Dimension("feature vectors do not match the covariance block".into()));
    }
    Ok(phi_i.dot(&(k_ij * phi_j)))
}

/// `C_ij(s,u) = φ_i(s)ᵀK_ijφ_j(u)`, plus `σ²_δi` when `i = j` and `s = u`.
pub fn cross_cov(m: &BivariateModel, i: usize, j: usize, s: &Location, u: &Location) -> Result<f64> {
    let k = joint_block(m, i, j)?;
    let c = cross_cov_features(&m.basis(i).eval(s)?, &k, &m.basis(j).eval(u)?)?;
    let nugget = if i == j && s.exact_key() == u.exact_key() {
        m.noise(i).sigma2_delta
    } else {
        0.0
    };
    Ok(c + nugget)
}

/// Predicts `Y_target` at each location from both datasets jointly.
pub fn cokrige(
    m: &BivariateModel,
    data: &BivariateDataset,
    target: usize,
    targets: &[Location],
    level: f64,
) -> Result<Vec<PredictiveResult>> {
    check_process(target)?;
    check_level(level)?;
    if data.is_empty() {
        return Err(FrkError::InvalidParameter("cokriging needs at least one observation".into()));
    }
    let k = assemble_joint_k(m)?;
    let (r1, r2) = (m.basis1.len(), m.basis2.len());
    let total = r1 + r2;

    let mut phi = DesignMatrix::from_rows(total, Vec::new());
    let (mut delta, mut eps, mut keys) = (Vec::new(), Vec::new(), Vec::new());
    let mut z = Vec::new();
    let mut locs: Vec<&Location> = Vec::new();
    let mut groups = Vec::new();
    for (process, ds) in [(1usize, &data.first), (2, &data.second)] {
        let Some(ds) = ds else { continue };
        let offset = if process == 1 { 0 } else { r1 };
        phi = phi.vstack(&design_matrix(m.basis(process), ds)?.shifted(offset, total));
        delta.extend(std::iter::repeat_n(m.noise(process).sigma2_delta, ds.len()));
        eps.extend(std::iter::repeat_n(m.noise(process).sigma2_eps, ds.len()));
        keys.extend(ds.locations().iter().map(|l| (process, l.exact_key())));
        z.extend(ds.z().iter().copied());
        locs.extend(ds.locations());
        groups.extend(std::iter::repeat_n(process, ds.len()));
    }
    let solve = FittedSolve::new(phi, &k, NoiseCov::nugget(&keys, &delta, &eps)?)?;
    let predictor = Predictor::new(solve, &DVector::from_vec(z), &locs, &groups)?;
    let offset = if target == 1 { 0 } else { r1 };
    let nugget = m.noise(target).sigma2_delta;
    targets
        .par_iter()
        .map(|loc| {
            let own = m.basis(target).eval(loc)?;
            let mut phi0 = DVector::zeros(total);
            phi0.rows_mut(offset, own.len()).copy_from(&own);
            let (mean, var) = predictor.predict_point(&phi0, nugget, target, loc);
            Ok(PredictiveResult::gaussian(loc.clone(), mean, var, level))
        })
        .collect()
}
