//! Measurement-scale covariance `C_ξ` of `ξ = δ + ε`.
//!
//! `δ` is a function of location, so rows observed at bitwise-identical
//! coordinates share one draw of it while `ε` stays independent per row.
//! The resulting `C_ξ = diag(d) + Σ_g s_g 1_g1_gᵀ` is block diagonal with one
//! block per repeated site; every block inverts in closed form:
//!
//! `(D_g + s 11ᵀ)⁻¹ = D_g⁻¹ − c D_g⁻¹11ᵀD_g⁻¹` with `c = s / (1 + s·1ᵀD_g⁻¹1)`.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use nalgebra::{DMatrix, DVector};

use crate::covariance::NoiseParams;
use crate::data::Location;
use crate::design::DesignMatrix;
use crate::error::{FrkError, Result};

#[derive(Debug, Clone, PartialEq)]
struct Group {
    rows: Vec<usize>,
    shared: f64,
    c: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCov {
    diag: DVector<f64>,
    groups: Vec<Group>,
    member: Vec<Option<usize>>,
}

impl NoiseCov {
    /// Independent rows with the given variances.
    pub fn diagonal(diag: DVector<f64>) -> Result<Self> {
        Self::with_groups(diag, Vec::new())
    }

    /// `diag(d)` plus a shared variance on each listed set of rows. Sets must
    /// be disjoint; zero shared variances are dropped.
    pub fn with_groups(diag: DVector<f64>, groups: Vec<(Vec<usize>, f64)>) -> Result<Self> {
        if let Some(v) = diag.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(FrkError::Singular(format!("C_xi needs positive finite row variances, found {v}")));
        }
        let n = diag.len();
        let mut member = vec![None; n];
        let mut kept = Vec::new();
        for (rows, shared) in groups {
            if !(shared >= 0.0 && shared.is_finite()) {
                return Err(FrkError::InvalidParameter(format!("shared variance {shared}")));
            }
            if shared == 0.0 || rows.is_empty() {
                continue;
            }
            for &i in &rows {
                if i >= n || member[i].is_some() {
                    return Err(FrkError::InvalidParameter(format!("noise group row {i} out of range or repeated")));
                }
                member[i] = Some(kept.len());
            }
            let inv_sum: f64 = rows.iter().map(|&i| 1.0 / diag[i]).sum();
            let c = shared / (1.0 + shared * inv_sum);
            kept.push(Group { rows, shared, c });
        }
        Ok(NoiseCov { diag, groups: kept, member })
    }

    /// Rows with equal keys share `delta` (taken from the first row of the
    /// group); a row alone at its key gets `delta + eps` on the diagonal.
    pub fn nugget<K: Hash + Eq>(keys: &[K], delta: &[f64], eps: &[f64]) -> Result<Self> {
        let n = keys.len();
        if delta.len() != n || eps.len() != n {
            return Err(FrkError::Dimension("noise inputs disagree on n".into()));
        }
        let rows = group_rows(keys);
        let mut diag = DVector::zeros(n);
        let mut groups = Vec::new();
        for rows in rows {
            if rows.len() == 1 {
                diag[rows[0]] = delta[rows[0]] + eps[rows[0]];
            } else {
                for &i in &rows {
                    diag[i] = eps[i];
                }
                let s = delta[rows[0]];
                groups.push((rows, s));
            }
        }
        Self::with_groups(diag, groups)
    }

    /// Single-process noise at the given sites.
    pub fn at_sites<'a>(locations: impl IntoIterator<Item = &'a Location>, noise: &NoiseParams) -> Result<Self> {
        let keys: Vec<Vec<u64>> = locations.into_iter().map(|l| l.exact_key()).collect();
        let n = keys.len();
        Self::nugget(&keys, &vec![noise.sigma2_delta; n], &vec![noise.sigma2_eps; n])
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Independent part `d`.
    pub fn diag(&self) -> &DVector<f64> {
        &self.diag
    }

    /// Rows of each shared block with its variance.
    pub fn groups(&self) -> impl Iterator<Item = (&[usize], f64)> + '_ {
        self.groups.iter().map(|g| (g.rows.as_slice(), g.shared))
    }

    /// `C_ξ⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut w = v.component_div(&self.diag);
        for g in &self.groups {
            let t: f64 = g.rows.iter().map(|&i| w[i]).sum();
            for &i in &g.rows {
                w[i] -= g.c * t / self.diag[i];
            }
        }
        w
    }

    /// `C_ξ⁻¹ u` for a sparse `u`, returned sparse and sorted by row.
    pub fn solve_sparse(&self, u: &[(usize, f64)]) -> Vec<(usize, f64)> {
        let mut out: BTreeMap<usize, f64> = BTreeMap::new();
        let mut totals: BTreeMap<usize, f64> = BTreeMap::new();
        for &(i, x) in u {
            let w = x / self.diag[i];
            *out.entry(i).or_default() += w;
            if let Some(g) = self.member[i] {
                *totals.entry(g).or_default() += w;
            }
        }
        for (g, t) in totals {
            let g = &self.groups[g];
            for &j in &g.rows {
                *out.entry(j).or_default() -= g.c * t / self.diag[j];
            }
        }
        out.into_iter().collect()
    }

    /// `vᵀC_ξ⁻¹v`.
    pub fn quad(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.solve(v))
    }

    /// `log|C_ξ|`.
    pub fn log_det(&self) -> f64 {
        let diag: f64 = self.diag.iter().map(|d| d.ln()).sum();
        let shared: f64 = self
            .groups
            .iter()
            .map(|g| (1.0 + g.shared * g.rows.iter().map(|&i| 1.0 / self.diag[i]).sum::<f64>()).ln())
            .sum();
        diag + shared
    }

    /// `(C_ξ⁻¹)ᵢᵢ`.
    pub fn inverse_diag_entry(&self, i: usize) -> f64 {
        let d = self.diag[i];
        match self.member[i] {
            Some(g) => 1.0 / d - self.groups[g].c / (d * d),
            None => 1.0 / d,
        }
    }

    /// `ΦᵀC_ξ⁻¹Φ`.
    pub fn gram(&self, phi: &DesignMatrix) -> DMatrix<f64> {
        let mut gram = phi.weighted_gram(&self.diag.map(|v| 1.0 / v));
        for g in &self.groups {
            let mut h: BTreeMap<usize, f64> = BTreeMap::new();
            for &i in &g.rows {
                for (j, x) in phi.row(i) {
                    *h.entry(j).or_default() += x / self.diag[i];
                }
            }
            for (&a, &ha) in &h {
                for (&b, &hb) in &h {
                    gram[(a, b)] -= g.c * ha * hb;
                }
            }
        }
        gram
    }

    /// Dense `C_ξ`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::from_diagonal(&self.diag);
        for g in &self.groups {
            for &i in &g.rows {
                for &j in &g.rows {
                    m[(i, j)] += g.shared;
                }
            }
        }
        m
    }
}

/// Copies the draw of each site's first row onto the later rows at the same
/// site, so `δ` is a function of location.
pub fn share_by_site(locations: &[Location], mut draws: DVector<f64>) -> DVector<f64> {
    let keys: Vec<Vec<u64>> = locations.iter().map(|l| l.exact_key()).collect();
    for rows in group_rows(&keys) {
        let first = draws[rows[0]];
        for &i in &rows[1..] {
            draws[i] = first;
        }
    }
    draws
}

/// Row indices grouped by equal key, in order of first appearance.
pub fn group_rows<K: Hash + Eq>(keys: &[K]) -> Vec<Vec<usize>> {
    let mut slot: HashMap<&K, usize> = HashMap::new();
    let mut out: Vec<Vec<usize>> = Vec::new();
    for (i, k) in keys.iter().enumerate() {
        let s = *slot.entry(k).or_insert_with(|| {
            out.push(Vec::new());
            out.len() - 1
        });
        out[s].push(i);
    }
    out
}
