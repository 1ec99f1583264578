//! Exact minimum-cost assignment of rows to distinct columns (rows ≤ cols).
//!
//! Shortest augmenting paths with row/column potentials: each row is added
//! in turn and a Dijkstra-like scan over columns finds the cheapest way to
//! re-route existing matches. `O(rows² · cols)`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `row_to_col[i]` is the column matched to row `i`.
    pub row_to_col: Vec<usize>,
    pub cols: usize,
    pub total_cost: f64,
}

impl Assignment {
    /// Boolean mask over columns.
    pub fn matched_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.cols];
        for &c in &self.row_to_col {
            mask[c] = true;
        }
        mask
    }
}

/// Minimizes `Σ_i cost[i][ξ(i)]` over injective `ξ`. `cost` is row-major
/// `rows × cols`; entries must be finite.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Assignment> {
    if rows > cols {
        return Err(Error::Capacity { gt: rows, proposals: cols });
    }
    if cost.len() != rows * cols {
        return Err(Error::Invariant(format!("cost has {} entries, expected {rows}x{cols}", cost.len())));
    }
    if let Some(v) = cost.iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("non-finite matching cost {v}")));
    }
    // 1-based with a virtual column 0, as in the classic formulation.
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    let mut minv = vec![0.0f64; cols + 1];
    let mut used = vec![false; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    let total_cost = row_to_col.iter().enumerate().map(|(i, &j)| cost[i * cols + j]).sum();
    Ok(Assignment { row_to_col, cols, total_cost })
}
