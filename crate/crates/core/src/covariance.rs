//! Coefficient covariance models `K`, the implied process covariance,
//! positive-semidefiniteness checks, and the half-integer Matérn kernel.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::data::{euclid, Location};
use crate::error::{FrkError, Result};

/// Parametrizations of `K = cov(α, α)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KModel {
    Unstructured { k: DMatrix<f64> },
    ScaledIdentity { variance: f64 },
    /// `variance · rho^|i−j|` within each resolution block, zero across blocks.
    Ar1PerResolution { variance: f64, rho: f64 },
    /// `variance · exp(−‖c_i − c_j‖ / length_scale)` over basis centers,
    /// within each resolution block.
    ExpCentroid { variance: f64, length_scale: f64 },
}

impl KModel {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FrkError::InvalidParameter(m));
        match *self {
            KModel::Unstructured { ref k } => {
                if k.nrows() != k.ncols() {
                    return Err(FrkError::Dimension(format!(
                        "unstructured K is {}x{}",
                        k.nrows(),
                        k.ncols()
                    )));
                }
                check_symmetric(k)
            }
            KModel::ScaledIdentity { variance } if !(variance >= 0.0) => {
                bad(format!("variance {variance} must be nonnegative"))
            }
            KModel::Ar1PerResolution { variance, .. } | KModel::ExpCentroid { variance, .. }
                if !(variance >= 0.0) =>
            {
                bad(format!("variance {variance} must be nonnegative"))
            }
            KModel::Ar1PerResolution { rho, .. } if !(rho.abs() < 1.0) => {
                bad(format!("AR(1) coefficient {rho} must lie in (-1, 1)"))
            }
            KModel::ExpCentroid { length_scale, .. } if !(length_scale > 0.0 && length_scale.is_finite()) => {
                bad(format!("length scale {length_scale} must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Overall scale parameter, if the model has one.
    pub fn variance(&self) -> Option<f64> {
        match *self {
            KModel::Unstructured { .. } => None,
            KModel::ScaledIdentity { variance }
            | KModel::Ar1PerResolution { variance, .. }
            | KModel::ExpCentroid { variance, .. } => Some(variance),
        }
    }

    /// Same structure with a new scale.
    pub fn with_variance(&self, variance: f64) -> KModel {
        match *self {
            KModel::Unstructured { .. } => KModel::ScaledIdentity { variance },
            KModel::ScaledIdentity { .. } => KModel::ScaledIdentity { variance },
            KModel::Ar1PerResolution { rho, .. } => KModel::Ar1PerResolution { variance, rho },
            KModel::ExpCentroid { length_scale, .. } => KModel::ExpCentroid {
                variance,
                length_scale,
            },
        }
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(FrkError::InvalidParameter(format!(
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    m[(i, j)],
                    m[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// Unit-variance correlation structure of a blocked model.
pub(crate) fn ar1_structure(basis: &BasisSet, rho: f64) -> DMatrix<f64> {
    let r = basis.len();
    let mut k = DMatrix::zeros(r, r);
    for block in basis.resolution_blocks() {
        for i in block.clone() {
            for j in block.clone() {
                let lag = (i as i32 - j as i32).unsigned_abs() as i32;
                k[(i, j)] = if lag == 0 { 1.0 } else { rho.powi(lag) };
            }
        }
    }
    k
}

pub(crate) fn exp_structure(basis: &BasisSet, length_scale: f64) -> Result<DMatrix<f64>> {
    let centers: Vec<Vec<f64>> = basis
        .functions()
        .iter()
        .map(|f| {
            f.center().ok_or_else(|| {
                FrkError::InvalidParameter("centroid covariance needs every basis function to have a center".into())
            })
        })
        .collect::<Result<_>>()?;
    let r = basis.len();
    let mut k = DMatrix::zeros(r, r);
    for block in basis.resolution_blocks() {
        for i in block.clone() {
            for j in block.clone() {
                if centers[i].len() != centers[j].len() {
                    return Err(FrkError::Dimension("basis centers have mixed dimensions".into()));
                }
                k[(i, j)] = (-euclid(&centers[i], &centers[j]) / length_scale).exp();
            }
        }
    }
    Ok(k)
}

/// Assembles the r×r matrix `K` for a basis.
pub fn k_matrix(model: &KModel, basis: &BasisSet) -> Result<DMatrix<f64>> {
    model.validate()?;
    let r = basis.len();
    match model {
        KModel::Unstructured { k } => {
            if k.nrows() != r {
                return Err(FrkError::Dimension(format!("K is {}x{}, basis has {r} functions", k.nrows(), k.ncols())));
            }
            Ok(k.clone())
        }
        KModel::ScaledIdentity { variance } => Ok(DMatrix::identity(r, r) * *variance),
        KModel::Ar1PerResolution { variance, rho } => Ok(ar1_structure(basis, *rho) * *variance),
        KModel::ExpCentroid {
            variance,
            length_scale,
        } => Ok(exp_structure(basis, *length_scale)? * *variance),
    }
}

/// Fine-scale (`σ²_δ`) and measurement-error (`σ²_ε`) variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub sigma2_delta: f64,
    pub sigma2_eps: f64,
}

impl NoiseParams {
    pub fn new(sigma2_delta: f64, sigma2_eps: f64) -> Result<Self> {
        let p = NoiseParams {
            sigma2_delta,
            sigma2_eps,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2_delta >= 0.0 && self.sigma2_eps >= 0.0)
            || !self.sigma2_delta.is_finite()
            || !self.sigma2_eps.is_finite()
        {
            return Err(FrkError::InvalidParameter(format!(
                "noise variances must be finite and nonnegative: delta={}, eps={}",
                self.sigma2_delta, self.sigma2_eps
            )));
        }
        Ok(())
    }

    /// `σ²_ξ = σ²_δ + σ²_ε`, the diagonal of `C_ξ`.
    pub fn xi(&self) -> f64 {
        self.sigma2_delta + self.sigma2_eps
    }
}

fn same_point(s: &Location, u: &Location) -> bool {
    s.coords().iter().zip(u.coords()).all(|(a, b)| a == b)
}

/// A square root `F` with `FFᵀ = M` for symmetric PSD `M`; eigenvalues
/// below zero are treated as zero.
pub fn psd_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(m)?;
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// `C_Y(s,u) = φ(s)ᵀKφ(u) + σ²_δ·1{s = u}`.
pub fn cov_y(s: &Location, u: &Location, basis: &BasisSet, k: &DMatrix<f64>, noise: &NoiseParams) -> Result<f64> {
    if s.dim() != u.dim() {
        return Err(FrkError::Dimension(format!("{}-d vs {}-d location", s.dim(), u.dim())));
    }
    if k.nrows() != basis.len() || k.ncols() != basis.len() {
        return Err(FrkError::Dimension(format!(
            "K is {}x{}, basis has {} functions",
            k.nrows(),
            k.ncols(),
            basis.len()
        )));
    }
    let ps = basis.eval(s)?;
    let pu = basis.eval(u)?;
    let nugget = if same_point(s, u) { noise.sigma2_delta } else { 0.0 };
    Ok(ps.dot(&(k * pu)) + nugget)
}

/// Outcome of [`psd_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdReport {
    pub is_psd: bool,
    pub min_eigenvalue: f64,
}

/// PSD test with tolerance `λ_min ≥ −1e−10·max(1, ‖M‖_∞)`.
pub fn psd_check(m: &DMatrix<f64>) -> Result<PsdReport> {
    if m.nrows() != m.ncols() {
        return Err(FrkError::Dimension(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    check_symmetric(m)?;
    if m.is_empty() {
        return Ok(PsdReport {
            is_psd: true,
            min_eigenvalue: 0.0,
        });
    }
    let inf_norm = m
        .row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let sym = (m + m.transpose()) * 0.5;
    let lambda_min = SymmetricEigen::new(sym).eigenvalues.min();
    Ok(PsdReport {
        is_psd: lambda_min >= -1e-10 * inf_norm.max(1.0),
        min_eigenvalue: lambda_min,
    })
}

/// Supported Matérn smoothness values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Smoothness {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl Smoothness {
    pub fn from_nu(nu: f64) -> Result<Self> {
        match nu {
            x if x == 0.5 => Ok(Smoothness::Half),
            x if x == 1.5 => Ok(Smoothness::ThreeHalves),
            x if x == 2.5 => Ok(Smoothness::FiveHalves),
            _ => Err(FrkError::InvalidParameter(format!(
                "Matérn smoothness {nu} unsupported; use 0.5, 1.5 or 2.5"
            ))),
        }
    }

    pub fn nu(self) -> f64 {
        match self {
            Smoothness::Half => 0.5,
            Smoothness::ThreeHalves => 1.5,
            Smoothness::FiveHalves => 2.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaternParams {
    pub variance: f64,
    pub range: f64,
    pub smoothness: Smoothness,
}

impl MaternParams {
    pub fn new(variance: f64, range: f64, nu: f64) -> Result<Self> {
        if !(variance >= 0.0) || !(range > 0.0) {
            return Err(FrkError::InvalidParameter(format!(
                "Matérn needs variance >= 0 and range > 0, got {variance}, {range}"
            )));
        }
        Ok(MaternParams {
            variance,
            range,
            smoothness: Smoothness::from_nu(nu)?,
        })
    }
}

/// Matérn covariance at distance `h`, scaled so that `x = √(2ν)·h/ρ`.
pub fn matern(h: f64, p: &MaternParams) -> Result<f64> {
    if !(h >= 0.0) {
        return Err(FrkError::InvalidParameter(format!("distance {h} must be nonnegative")));
    }
    let x = (2.0 * p.smoothness.nu()).sqrt() * h / p.range;
    let shape = match p.smoothness {
        Smoothness::Half => (-x).exp(),
        Smoothness::ThreeHalves => (1.0 + x) * (-x).exp(),
        Smoothness::FiveHalves => (1.0 + x + x * x / 3.0) * (-x).exp(),
    };
    Ok(p.variance * shape)
}

/// Writes a dense matrix as whitespace-separated rows.
pub fn write_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    let mut f = File::create(path).map_err(|e| FrkError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| FrkError::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| FrkError::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| FrkError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| FrkError::Csv {
                    path: path.to_path_buf(),
                    row: i + 1,
                    message: format!("non-numeric entry '{t}'"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(FrkError::Csv {
                    path: path.to_path_buf(),
                    row: i + 1,
                    message: "ragged matrix row".into(),
                });
            }
        }
        rows.push(row);
    }
    let (nr, nc) = (rows.len(), rows.first().map_or(0, Vec::len));
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}
