//! Row-compressed storage for the n×r basis design matrix.
//!
//! Compactly supported basis functions leave most of `Φ` zero, so only
//! the nonzero entries of each row are kept. All products used by the
//! low-rank solver touch each stored entry a bounded number of times.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl DesignMatrix {
    /// Builds from per-row `(column, value)` lists. Exact zeros are dropped.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let nnz: usize = rows.iter().map(Vec::len).sum();
        let mut cols = Vec::with_capacity(nnz);
        let mut vals = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for row in rows {
            for (j, v) in row {
                assert!(j < ncols, "column {j} out of range {ncols}");
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        DesignMatrix {
            ncols,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let rows = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| (j, m[(i, j)])).collect())
            .collect();
        DesignMatrix::from_rows(m.ncols(), rows)
    }

    pub fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[a..b].iter().copied().zip(self.vals[a..b].iter().copied())
    }

    pub fn row_dense(&self, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(self.ncols);
        for (j, x) in self.row(i) {
            v[j] = x;
        }
        v
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols);
        for i in 0..self.nrows() {
            for (j, x) in self.row(i) {
                m[(i, j)] = x;
            }
        }
        m
    }

    /// `Φ a` for an r-vector `a`.
    pub fn mul_vec(&self, a: &DVector<f64>) -> DVector<f64> {
        assert_eq!(a.len(), self.ncols);
        DVector::from_iterator(
            self.nrows(),
            (0..self.nrows()).map(|i| self.row(i).map(|(j, x)| x * a[j]).sum::<f64>()),
        )
    }

    /// `Φᵀ v` for an n-vector `v`.
    pub fn tr_mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        assert_eq!(v.len(), self.nrows());
        let mut out = DVector::zeros(self.ncols);
        for i in 0..self.nrows() {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            for (j, x) in self.row(i) {
                out[j] += x * vi;
            }
        }
        out
    }

    /// `Φ A` for an r×k dense matrix.
    pub fn mul_mat(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(a.nrows(), self.ncols);
        let mut out = DMatrix::zeros(self.nrows(), a.ncols());
        for i in 0..self.nrows() {
            for (j, x) in self.row(i) {
                for c in 0..a.ncols() {
                    out[(i, c)] += x * a[(j, c)];
                }
            }
        }
        out
    }

    /// `Φᵀ diag(w) Φ`.
    pub fn weighted_gram(&self, w: &DVector<f64>) -> DMatrix<f64> {
        assert_eq!(w.len(), self.nrows());
        let mut g = DMatrix::zeros(self.ncols, self.ncols);
        for i in 0..self.nrows() {
            let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
            for p in a..b {
                let wp = w[i] * self.vals[p];
                let jp = self.cols[p];
                for q in a..b {
                    g[(jp, self.cols[q])] += wp * self.vals[q];
                }
            }
        }
        g
    }

    /// Rows selected by index, in the order given.
    pub fn select_rows(&self, rows: &[usize]) -> DesignMatrix {
        let r = rows.iter().map(|&i| self.row(i).collect()).collect();
        DesignMatrix::from_rows(self.ncols, r)
    }

    /// Places `self` in columns `offset..offset+ncols` of a wider matrix.
    pub fn shifted(&self, offset: usize, total_cols: usize) -> DesignMatrix {
        assert!(offset + self.ncols <= total_cols);
        let rows = (0..self.nrows())
            .map(|i| self.row(i).map(|(j, x)| (j + offset, x)).collect())
            .collect();
        DesignMatrix::from_rows(total_cols, rows)
    }

    /// Row-wise concatenation.
    pub fn vstack(&self, other: &DesignMatrix) -> DesignMatrix {
        assert_eq!(self.ncols, other.ncols);
        let mut rows: Vec<Vec<(usize, f64)>> = (0..self.nrows()).map(|i| self.row(i).collect()).collect();
        rows.extend((0..other.nrows()).map(|i| other.row(i).collect()));
        DesignMatrix::from_rows(self.ncols, rows)
    }
}
