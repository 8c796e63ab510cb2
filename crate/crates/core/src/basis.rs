//! Basis functions and the n×r design matrix `Φ`.
//!
//! Bisquare functions `(1 − (d/w)²)²` on the closed ball of radius `w`,
//! arranged on regular multi-resolution grids, plus space-time tensor
//! products of a spatial and a temporal set.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{euclid, Location, SpatialDataset};
use crate::design::DesignMatrix;
use crate::error::{FrkError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BisquareFn {
    center: Vec<f64>,
    aperture: f64,
}

impl BisquareFn {
    pub fn new(center: Location, aperture: f64) -> Result<Self> {
        if !(aperture > 0.0 && aperture.is_finite()) {
            return Err(FrkError::InvalidParameter(format!(
                "bisquare aperture must be positive and finite, got {aperture}"
            )));
        }
        Ok(BisquareFn {
            center: center.coords().to_vec(),
            aperture,
        })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn aperture(&self) -> f64 {
        self.aperture
    }

    fn eval_coords(&self, s: &[f64]) -> f64 {
        let d = euclid(s, &self.center);
        if d <= self.aperture {
            let u = d / self.aperture;
            let t = 1.0 - u * u;
            t * t
        } else {
            0.0
        }
    }
}

/// `φ(s) = (1 − (‖s−c‖/w)²)²` for `‖s−c‖ ≤ w`, zero otherwise.
pub fn bisquare_eval(f: &BisquareFn, s: &Location) -> Result<f64> {
    if s.dim() != f.center.len() {
        return Err(FrkError::Dimension(format!(
            "bisquare is {}-d, location is {}-d",
            f.center.len(),
            s.dim()
        )));
    }
    Ok(f.eval_coords(s.coords()))
}

/// Product of a spatial factor (all coordinates but the last) and a
/// temporal factor (the last coordinate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorStFn {
    pub spatial: Box<BasisFunction>,
    pub temporal: Box<BasisFunction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BasisFunction {
    Bisquare(BisquareFn),
    /// Identically one; used e.g. as a trivial temporal factor.
    Constant,
    Tensor(TensorStFn),
}

impl BasisFunction {
    /// Input dimension, or `None` when any dimension is accepted.
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            BasisFunction::Bisquare(b) => Some(b.center.len()),
            BasisFunction::Constant => None,
            BasisFunction::Tensor(t) => {
                let sd = t.spatial.input_dim();
                sd.map(|d| d + 1)
            }
        }
    }

    pub(crate) fn eval_coords(&self, s: &[f64]) -> f64 {
        match self {
            BasisFunction::Bisquare(b) => b.eval_coords(s),
            BasisFunction::Constant => 1.0,
            BasisFunction::Tensor(t) => {
                let (space, time) = s.split_at(s.len() - 1);
                let a = t.spatial.eval_coords(space);
                if a == 0.0 {
                    0.0
                } else {
                    a * t.temporal.eval_coords(time)
                }
            }
        }
    }

    /// Center used by centroid-distance covariance models.
    pub fn center(&self) -> Option<Vec<f64>> {
        match self {
            BasisFunction::Bisquare(b) => Some(b.center.clone()),
            BasisFunction::Constant => None,
            BasisFunction::Tensor(t) => {
                let mut c = t.spatial.center()?;
                c.extend(t.temporal.center()?);
                Some(c)
            }
        }
    }
}

/// Per-resolution grid layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionSpec {
    /// Centers per axis.
    pub counts: Vec<usize>,
    /// Aperture as a multiple of the center spacing.
    pub aperture_ratio: f64,
}

/// Multi-resolution regular-grid layout over an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiResSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Ordered coarse to fine.
    pub resolutions: Vec<ResolutionSpec>,
}

/// Default aperture-to-spacing ratio; adjacent same-resolution supports overlap.
pub const DEFAULT_APERTURE_RATIO: f64 = 1.5;

impl MultiResSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, counts: &[Vec<usize>], aperture_ratio: f64) -> Self {
        MultiResSpec {
            lower,
            upper,
            resolutions: counts
                .iter()
                .map(|c| ResolutionSpec {
                    counts: c.clone(),
                    aperture_ratio,
                })
                .collect(),
        }
    }

    /// Total number of basis functions this layout produces.
    pub fn total(&self) -> usize {
        self.resolutions
            .iter()
            .map(|r| r.counts.iter().product::<usize>())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BasisRecord {
    resolution: usize,
    function: BasisFunction,
}

/// Ordered basis `φ(·) = (φ₁, …, φ_r)ᵀ` with a resolution label per function.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    functions: Vec<BasisFunction>,
    resolutions: Vec<usize>,
    input_dim: Option<usize>,
}

impl BasisSet {
    pub fn new(functions: Vec<BasisFunction>, resolutions: Vec<usize>) -> Result<Self> {
        if functions.is_empty() {
            return Err(FrkError::InvalidParameter("basis needs at least one function".into()));
        }
        if functions.len() != resolutions.len() {
            return Err(FrkError::Dimension(format!(
                "{} functions but {} resolution labels",
                functions.len(),
                resolutions.len()
            )));
        }
        let mut input_dim = None;
        for f in &functions {
            match (input_dim, f.input_dim()) {
                (None, d) => input_dim = d,
                (Some(a), Some(b)) if a != b => {
                    return Err(FrkError::Dimension(format!(
                        "basis mixes {a}-d and {b}-d functions"
                    )))
                }
                _ => {}
            }
        }
        Ok(BasisSet {
            functions,
            resolutions,
            input_dim,
        })
    }

    /// Single-resolution set of bisquares.
    pub fn from_bisquares(fns: Vec<BisquareFn>) -> Result<Self> {
        let n = fns.len();
        BasisSet::new(fns.into_iter().map(BasisFunction::Bisquare).collect(), vec![0; n])
    }

    /// The one-function set `{1}`.
    pub fn constant() -> Self {
        BasisSet {
            functions: vec![BasisFunction::Constant],
            resolutions: vec![0],
            input_dim: None,
        }
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn functions(&self) -> &[BasisFunction] {
        &self.functions
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.input_dim
    }

    /// Index ranges of consecutive functions sharing a resolution label.
    pub fn resolution_blocks(&self) -> Vec<std::ops::Range<usize>> {
        let mut blocks = Vec::new();
        let mut start = 0;
        for i in 1..=self.len() {
            if i == self.len() || self.resolutions[i] != self.resolutions[start] {
                blocks.push(start..i);
                start = i;
            }
        }
        blocks
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        match self.input_dim {
            Some(b) if b != d => Err(FrkError::Dimension(format!(
                "basis expects {b}-d locations, got {d}-d"
            ))),
            _ => Ok(()),
        }
    }

    /// Dense evaluation vector `φ(s)`.
    pub fn eval(&self, s: &Location) -> Result<DVector<f64>> {
        self.check_dim(s.dim())?;
        Ok(DVector::from_iterator(
            self.len(),
            self.functions.iter().map(|f| f.eval_coords(s.coords())),
        ))
    }

    pub(crate) fn eval_sparse(&self, s: &[f64]) -> Vec<(usize, f64)> {
        self.functions
            .iter()
            .enumerate()
            .filter_map(|(j, f)| {
                let v = f.eval_coords(s);
                (v != 0.0).then_some((j, v))
            })
            .collect()
    }

    /// `Φ[i][j] = φ_j(s_i)` over the given locations, rows in input order.
    pub fn design_at(&self, locations: &[Location]) -> Result<DesignMatrix> {
        for l in locations {
            self.check_dim(l.dim())?;
        }
        let rows: Vec<Vec<(usize, f64)>> = locations
            .par_iter()
            .map(|l| self.eval_sparse(l.coords()))
            .collect();
        Ok(DesignMatrix::from_rows(self.len(), rows))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (f, &res) in self.functions.iter().zip(&self.resolutions) {
            let rec = BasisRecord {
                resolution: res,
                function: f.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).map_err(|e| FrkError::Numeric(e.to_string()))?);
            out.push('\n');
        }
        let mut file = File::create(path).map_err(|e| FrkError::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| FrkError::io(path, e))
    }

    /// Reads the one-record-per-line format written by [`BasisSet::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| FrkError::io(path, e))?;
        let mut functions = Vec::new();
        let mut resolutions = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| FrkError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: BasisRecord = serde_json::from_str(&line).map_err(|e| FrkError::Csv {
                path: path.to_path_buf(),
                row: i + 1,
                message: e.to_string(),
            })?;
            functions.push(rec.function);
            resolutions.push(rec.resolution);
        }
        BasisSet::new(functions, resolutions)
    }
}

/// Design matrix for a dataset's locations.
pub fn design_matrix(basis: &BasisSet, ds: &SpatialDataset) -> Result<DesignMatrix> {
    basis.design_at(ds.locations())
}

fn axis_grid(lo: f64, hi: f64, count: usize) -> (Vec<f64>, f64) {
    if count == 1 {
        (vec![0.5 * (lo + hi)], hi - lo)
    } else {
        let h = (hi - lo) / (count - 1) as f64;
        ((0..count).map(|k| lo + k as f64 * h).collect(), h)
    }
}

/// Regular-grid bisquares per resolution, coarse to fine, each resolution in
/// lexicographic grid order (first axis slowest).
///
/// Centers span the box edge to edge. The aperture is `aperture_ratio` times
/// the largest per-axis spacing of that resolution.
pub fn build_multires(spec: &MultiResSpec) -> Result<BasisSet> {
    let d = spec.lower.len();
    if d == 0 || spec.upper.len() != d {
        return Err(FrkError::Dimension("bounding box corners must share a positive dimension".into()));
    }
    if spec
        .lower
        .iter()
        .zip(&spec.upper)
        .any(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite())
    {
        return Err(FrkError::InvalidParameter("empty bounding box".into()));
    }
    if spec.resolutions.is_empty() {
        return Err(FrkError::InvalidParameter("need at least one resolution".into()));
    }
    let mut functions = Vec::with_capacity(spec.total());
    let mut labels = Vec::with_capacity(spec.total());
    for (res, rs) in spec.resolutions.iter().enumerate() {
        if rs.counts.len() != d || rs.counts.contains(&0) {
            return Err(FrkError::InvalidParameter(format!(
                "resolution {res}: need {d} grid counts, each at least 1"
            )));
        }
        if !(rs.aperture_ratio > 0.0) {
            return Err(FrkError::InvalidParameter(format!(
                "resolution {res}: aperture ratio must be positive"
            )));
        }
        let axes: Vec<(Vec<f64>, f64)> = (0..d)
            .map(|a| axis_grid(spec.lower[a], spec.upper[a], rs.counts[a]))
            .collect();
        let spacing = axes.iter().map(|(_, h)| *h).fold(0.0, f64::max);
        let aperture = rs.aperture_ratio * spacing;
        let total: usize = rs.counts.iter().product();
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            let center: Vec<f64> = idx.iter().enumerate().map(|(a, &k)| axes[a].0[k]).collect();
            functions.push(BasisFunction::Bisquare(BisquareFn::new(Location::new(center)?, aperture)?));
            labels.push(res);
            for a in (0..d).rev() {
                idx[a] += 1;
                if idx[a] < rs.counts[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
    }
    BasisSet::new(functions, labels)
}

/// Tensor product `(a₁b₁, …, a₁b_l, …, a_kb_l)` of a spatial and a temporal set.
pub fn tensor_st_basis(spatial: &BasisSet, temporal: &BasisSet) -> Result<BasisSet> {
    if let Some(d) = temporal.input_dim() {
        if d != 1 {
            return Err(FrkError::Dimension(format!("temporal basis must be 1-d, got {d}-d")));
        }
    }
    let t_levels = temporal.resolutions.iter().max().map_or(1, |m| m + 1);
    let mut functions = Vec::with_capacity(spatial.len() * temporal.len());
    let mut labels = Vec::with_capacity(spatial.len() * temporal.len());
    for (a, &ra) in spatial.functions.iter().zip(&spatial.resolutions) {
        for (b, &rb) in temporal.functions.iter().zip(&temporal.resolutions) {
            functions.push(BasisFunction::Tensor(TensorStFn {
                spatial: Box::new(a.clone()),
                temporal: Box::new(b.clone()),
            }));
            labels.push(ra * t_levels + rb);
        }
    }
    BasisSet::new(functions, labels)
}
