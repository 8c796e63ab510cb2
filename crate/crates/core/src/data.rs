//! Locations, datasets, CSV ingestion and train/test splitting.
//!
//! Datasets keep rows in file order; every matrix built downstream (the
//! basis design matrix, the noise diagonal) is indexed by that order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FrkError, Result};

/// A point in a `d`-dimensional Euclidean domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Location(Vec<f64>);

impl Location {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(FrkError::Dimension("location needs at least one coordinate".into()));
        }
        if let Some(c) = coords.iter().find(|c| !c.is_finite()) {
            return Err(FrkError::InvalidParameter(format!("non-finite coordinate {c}")));
        }
        Ok(Location(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Appends a coordinate, e.g. a time index for the space-time product domain.
    pub fn with_extra(&self, value: f64) -> Result<Location> {
        let mut c = self.0.clone();
        c.push(value);
        Location::new(c)
    }

    /// Bit-level key for exact coordinate matching (`-0.0` folded into `0.0`).
    pub fn exact_key(&self) -> Vec<u64> {
        self.0
            .iter()
            .map(|&c| if c == 0.0 { 0.0f64.to_bits() } else { c.to_bits() })
            .collect()
    }
}

impl From<[f64; 1]> for Location {
    fn from(c: [f64; 1]) -> Self {
        Location(c.to_vec())
    }
}

impl From<[f64; 2]> for Location {
    fn from(c: [f64; 2]) -> Self {
        Location(c.to_vec())
    }
}

impl From<[f64; 3]> for Location {
    fn from(c: [f64; 3]) -> Self {
        Location(c.to_vec())
    }
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Euclidean distance between two locations of equal dimension.
pub fn distance(a: &Location, b: &Location) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(FrkError::Dimension(format!(
            "distance between {}-d and {}-d locations",
            a.dim(),
            b.dim()
        )));
    }
    Ok(euclid(a.coords(), b.coords()))
}

/// Point-referenced observations `Z` at `n` locations with optional covariates `X` (n×p).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDataset {
    locations: Vec<Location>,
    z: DVector<f64>,
    covariates: Option<DMatrix<f64>>,
}

impl SpatialDataset {
    pub fn new(
        locations: Vec<Location>,
        z: DVector<f64>,
        covariates: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let n = locations.len();
        if n == 0 {
            return Err(FrkError::Dimension("dataset must contain at least one row".into()));
        }
        if z.len() != n {
            return Err(FrkError::Dimension(format!("{n} locations but {} observations", z.len())));
        }
        let d = locations[0].dim();
        if locations.iter().any(|l| l.dim() != d) {
            return Err(FrkError::Dimension("locations have mixed dimensions".into()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(FrkError::InvalidParameter("non-finite observation".into()));
        }
        if let Some(x) = &covariates {
            if x.nrows() != n {
                return Err(FrkError::Dimension(format!(
                    "{n} locations but {} covariate rows",
                    x.nrows()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(FrkError::InvalidParameter("non-finite covariate".into()));
            }
        }
        Ok(SpatialDataset {
            locations,
            z,
            covariates,
        })
    }

    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.locations[0].dim()
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn z(&self) -> &DVector<f64> {
        &self.z
    }

    pub fn covariates(&self) -> Option<&DMatrix<f64>> {
        self.covariates.as_ref()
    }

    /// Number of fixed-effect columns (0 when no covariates).
    pub fn p(&self) -> usize {
        self.covariates.as_ref().map_or(0, |x| x.ncols())
    }

    /// `Xβ`, or zeros when there are no covariates.
    pub fn fixed_effect(&self, beta: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.covariates {
            None if beta.is_empty() => Ok(DVector::zeros(self.len())),
            None => Err(FrkError::Dimension(format!(
                "beta has {} entries but dataset has no covariates",
                beta.len()
            ))),
            Some(x) if x.ncols() == beta.len() => Ok(x * beta),
            Some(x) => Err(FrkError::Dimension(format!(
                "beta has {} entries, covariates have {} columns",
                beta.len(),
                x.ncols()
            ))),
        }
    }

    /// Same locations and covariates with new observations.
    pub fn with_z(&self, z: DVector<f64>) -> Result<Self> {
        SpatialDataset::new(self.locations.clone(), z, self.covariates.clone())
    }

    /// Rows selected by index, in the order given.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let locations = rows.iter().map(|&i| self.locations[i].clone()).collect();
        let z = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.z[i]));
        let covariates = self
            .covariates
            .as_ref()
            .map(|x| x.select_rows(rows.iter()));
        SpatialDataset::new(locations, z, covariates)
    }
}

/// One spatial dataset per time slice, `t = 1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct StDataset {
    slices: Vec<Option<SpatialDataset>>,
}

impl StDataset {
    /// `None` marks a time point with no observations.
    pub fn new(slices: Vec<Option<SpatialDataset>>) -> Result<Self> {
        if slices.is_empty() {
            return Err(FrkError::Dimension("need at least one time slice".into()));
        }
        Ok(StDataset { slices })
    }

    pub fn t_len(&self) -> usize {
        self.slices.len()
    }

    /// Slice at 1-based time `t`.
    pub fn slice(&self, t: usize) -> Option<&SpatialDataset> {
        self.slices.get(t.wrapping_sub(1)).and_then(|s| s.as_ref())
    }

    pub fn slices(&self) -> &[Option<SpatialDataset>] {
        &self.slices
    }

    pub fn total_len(&self) -> usize {
        self.slices.iter().flatten().map(|s| s.len()).sum()
    }
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub coords: Vec<String>,
    pub value: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    /// Prepend an all-ones column to the covariates.
    #[serde(default)]
    pub intercept: bool,
}

impl CsvSchema {
    pub fn new(coords: &[&str], value: &str) -> Self {
        CsvSchema {
            coords: coords.iter().map(|s| s.to_string()).collect(),
            value: value.to_string(),
            covariates: Vec::new(),
            intercept: false,
        }
    }

    fn p(&self) -> usize {
        self.covariates.len() + usize::from(self.intercept)
    }
}

fn column_index(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers.iter().position(|h| h.trim() == name).ok_or_else(|| {
        FrkError::Schema(format!("column '{name}' not found in {}", path.display()))
    })
}

fn parse_cell(rec: &csv::StringRecord, idx: usize, name: &str, row: usize, path: &Path) -> Result<f64> {
    let cell = rec.get(idx).map(str::trim).unwrap_or("");
    if cell.is_empty() {
        return Err(FrkError::Csv {
            path: path.to_path_buf(),
            row,
            message: format!("missing value in column '{name}'"),
        });
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(FrkError::Csv {
            path: path.to_path_buf(),
            row,
            message: format!("non-numeric value '{cell}' in column '{name}'"),
        }),
    }
}

struct RawRow {
    coords: Vec<f64>,
    z: f64,
    x: Vec<f64>,
    extra: Option<f64>,
}

fn read_rows(path: &Path, schema: &CsvSchema, extra: Option<&str>, need_value: bool) -> Result<Vec<RawRow>> {
    if schema.coords.is_empty() {
        return Err(FrkError::Schema("schema names no coordinate columns".into()));
    }
    let file = File::open(path).map_err(|e| FrkError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| FrkError::Csv {
            path: path.to_path_buf(),
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let coord_idx: Vec<usize> = schema
        .coords
        .iter()
        .map(|c| column_index(&headers, c, path))
        .collect::<Result<_>>()?;
    let z_idx = need_value.then(|| column_index(&headers, &schema.value, path)).transpose()?;
    let x_idx: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| column_index(&headers, c, path))
        .collect::<Result<_>>()?;
    let extra_idx = extra.map(|c| column_index(&headers, c, path)).transpose()?;

    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // 1-based data row numbering, header excluded
        let row = i + 1;
        let rec = rec.map_err(|e| FrkError::Csv {
            path: path.to_path_buf(),
            row,
            message: e.to_string(),
        })?;
        let coords = coord_idx
            .iter()
            .zip(&schema.coords)
            .map(|(&j, name)| parse_cell(&rec, j, name, row, path))
            .collect::<Result<Vec<_>>>()?;
        let z = match z_idx {
            Some(j) => parse_cell(&rec, j, &schema.value, row, path)?,
            None => f64::NAN,
        };
        let mut x = Vec::with_capacity(schema.p());
        if schema.intercept {
            x.push(1.0);
        }
        for (&j, name) in x_idx.iter().zip(&schema.covariates) {
            x.push(parse_cell(&rec, j, name, row, path)?);
        }
        let extra = match (extra_idx, extra) {
            (Some(j), Some(name)) => Some(parse_cell(&rec, j, name, row, path)?),
            _ => None,
        };
        rows.push(RawRow { coords, z, x, extra });
    }
    Ok(rows)
}

fn assemble(rows: Vec<RawRow>, p: usize) -> Result<SpatialDataset> {
    let n = rows.len();
    let z = DVector::from_iterator(n, rows.iter().map(|r| r.z));
    let covariates = (p > 0).then(|| DMatrix::from_fn(n, p, |i, j| rows[i].x[j]));
    let locations = rows
        .into_iter()
        .map(|r| Location::new(r.coords))
        .collect::<Result<Vec<_>>>()?;
    SpatialDataset::new(locations, z, covariates)
}

/// Reads a spatial dataset from a headed CSV file.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<SpatialDataset> {
    let path = path.as_ref();
    let rows = read_rows(path, schema, None, true)?;
    if rows.is_empty() {
        return Err(FrkError::Csv {
            path: path.to_path_buf(),
            row: 0,
            message: "no data rows".into(),
        });
    }
    assemble(rows, schema.p())
}

/// Reads locations and covariates only; the value column may be absent.
pub fn load_points(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<(Vec<Location>, Option<DMatrix<f64>>)> {
    let path = path.as_ref();
    let rows = read_rows(path, schema, None, false)?;
    if rows.is_empty() {
        return Err(FrkError::Csv {
            path: path.to_path_buf(),
            row: 0,
            message: "no data rows".into(),
        });
    }
    let p = schema.p();
    let x = (p > 0).then(|| DMatrix::from_fn(rows.len(), p, |i, j| rows[i].x[j]));
    let locs = rows.into_iter().map(|r| Location::new(r.coords)).collect::<Result<Vec<_>>>()?;
    Ok((locs, x))
}

/// Reads one numeric column.
pub fn load_column(path: impl AsRef<Path>, column: &str) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let schema = CsvSchema::new(&[column], column);
    Ok(read_rows(path, &schema, None, false)?.into_iter().map(|r| r.coords[0]).collect())
}

/// Reads a space-time dataset; `time_column` holds integer times `1..=T`.
/// Times with no rows become empty slices.
pub fn load_st_csv(path: impl AsRef<Path>, schema: &CsvSchema, time_column: &str) -> Result<StDataset> {
    let path = path.as_ref();
    let rows = read_rows(path, schema, Some(time_column), true)?;
    let mut groups: BTreeMap<usize, Vec<RawRow>> = BTreeMap::new();
    for (i, r) in rows.into_iter().enumerate() {
        let t = r.extra.unwrap_or(f64::NAN);
        if t.fract() != 0.0 || t < 1.0 {
            return Err(FrkError::Csv {
                path: path.to_path_buf(),
                row: i + 1,
                message: format!("time value {t} is not a positive integer"),
            });
        }
        groups.entry(t as usize).or_default().push(r);
    }
    let t_max = *groups.keys().next_back().ok_or_else(|| FrkError::Csv {
        path: path.to_path_buf(),
        row: 0,
        message: "no data rows".into(),
    })?;
    let mut slices = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        slices.push(match groups.remove(&t) {
            Some(rows) => Some(assemble(rows, schema.p())?),
            None => None,
        });
    }
    StDataset::new(slices)
}

/// Writes a dataset using the schema's column names. An intercept column, if
/// the schema declares one, is not written.
pub fn save_csv(path: impl AsRef<Path>, ds: &SpatialDataset, schema: &CsvSchema) -> Result<()> {
    let path = path.as_ref();
    if schema.coords.len() != ds.dim() {
        return Err(FrkError::Schema(format!(
            "schema has {} coordinate columns, dataset is {}-d",
            schema.coords.len(),
            ds.dim()
        )));
    }
    if schema.p() != ds.p() {
        return Err(FrkError::Schema(format!(
            "schema describes {} covariates, dataset has {}",
            schema.p(),
            ds.p()
        )));
    }
    let mut file = File::create(path).map_err(|e| FrkError::io(path, e))?;
    let mut header: Vec<&str> = schema.coords.iter().map(String::as_str).collect();
    header.push(&schema.value);
    header.extend(schema.covariates.iter().map(String::as_str));
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    let skip = usize::from(schema.intercept);
    for i in 0..ds.len() {
        let mut fields: Vec<String> = ds.locations[i].coords().iter().map(|c| c.to_string()).collect();
        fields.push(ds.z[i].to_string());
        if let Some(x) = &ds.covariates {
            fields.extend((skip..x.ncols()).map(|j| x[(i, j)].to_string()));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    file.write_all(out.as_bytes()).map_err(|e| FrkError::io(path, e))
}

/// Held-out fraction and seed for a random train/test partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fraction: f64,
    pub seed: u64,
}

/// Row indices of a split, both sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, spec: SplitSpec) -> Result<SplitIndices> {
    if !(spec.fraction > 0.0 && spec.fraction < 1.0) {
        return Err(FrkError::InvalidParameter(format!(
            "held-out fraction {} outside (0,1)",
            spec.fraction
        )));
    }
    if n < 2 {
        return Err(FrkError::InvalidParameter("split needs at least two rows".into()));
    }
    let n_test = (spec.fraction * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(FrkError::InvalidParameter(format!(
            "fraction {} of {n} rows leaves an empty partition",
            spec.fraction
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    idx.shuffle(&mut rng);
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(SplitIndices { train, test })
}

/// Deterministic disjoint train/test partition; row order is preserved within each part.
pub fn split(ds: &SpatialDataset, spec: SplitSpec) -> Result<(SpatialDataset, SpatialDataset)> {
    let idx = split_indices(ds.len(), spec)?;
    Ok((ds.subset(&idx.train)?, ds.subset(&idx.test)?))
}
