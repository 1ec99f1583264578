//! Compressed sparse row matrices for graph propagation.

use crate::error::{Error, Result};

/// CSR matrix with `f64` values. Column indices are sorted within each row.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists. Columns are sorted; duplicate
    /// columns within a row are rejected.
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Result<Self> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for (i, row) in rows.iter().enumerate() {
            let mut row = row.clone();
            row.sort_by_key(|&(j, _)| j);
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::Input(format!("duplicate column {} in row {i}", w[0].0)));
                }
            }
            for (j, v) in row {
                if j >= cols {
                    return Err(Error::Input(format!("column {j} out of range in row {i}")));
                }
                indices.push(j);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Ok(CsrMatrix {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates `(column, value)` pairs of row `i`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut dense = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                dense[i * self.cols + j] = v;
            }
        }
        dense
    }

    /// `self · x` where `x` is `cols × width` row-major.
    pub fn matmul_dense(&self, x: &[f64], width: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols * width);
        let mut out = vec![0.0; self.rows * width];
        for i in 0..self.rows {
            let dst = &mut out[i * width..(i + 1) * width];
            for (j, a) in self.row(i) {
                let src = &x[j * width..(j + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    /// `selfᵀ · y` where `y` is `rows × width` row-major.
    pub fn transpose_matmul_dense(&self, y: &[f64], width: usize) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows * width);
        let mut out = vec![0.0; self.cols * width];
        for i in 0..self.rows {
            let src = &y[i * width..(i + 1) * width];
            for (j, a) in self.row(i) {
                let dst = &mut out[j * width..(j + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }
}
