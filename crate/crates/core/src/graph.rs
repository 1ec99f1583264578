//! Density-driven and representation-driven semantic graphs over feature-map
//! cells.
//!
//! Node `i = y·W + x` is the cell at row `y`, column `x`. Every node keeps its
//! `K` most similar other cells plus a self-loop. Rows are built
//! independently, so the adjacency is directed.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows of the similarity matrix materialized at once when building graphs.
const ROW_BLOCK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Density,
    Representation,
}

/// Which end of the score range counts as "most similar".
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Smallest,
    Largest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub k: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { k: 4 }
    }
}

/// Boolean adjacency as sorted neighbor lists, self-loop included.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticGraph {
    pub kind: GraphKind,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub rows: Vec<Vec<usize>>,
    /// Zero-norm feature rows met while scoring (representation graphs only).
    #[serde(skip)]
    pub degenerate_rows: usize,
}

impl SemanticGraph {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// Self-loops only. Useful as a test fixture: propagation reduces to a
    /// per-node linear map.
    pub fn identity(kind: GraphKind, height: usize, width: usize) -> Self {
        SemanticGraph {
            kind,
            height,
            width,
            k: 0,
            rows: (0..height * width).map(|i| vec![i]).collect(),
            degenerate_rows: 0,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "n": self.n(),
            "k": self.k,
            "kind": self.kind,
            "height": self.height,
            "width": self.width,
            "rows": self.rows,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        Ok(serde_json::from_value(v.clone())?)
    }
}

/// Density dissimilarity of two cells; smaller is closer.
#[inline]
pub fn density_score(mi: f64, mj: f64) -> f64 {
    (mi - mj).abs()
}

/// Cosines are snapped to this grid before ranking. Mathematically equal
/// cosines (parallel feature vectors, say) otherwise differ in the last bits,
/// and which of them wins would change when every feature is rescaled.
pub const COSINE_RESOLUTION: f64 = 1.0 / (1u64 << 36) as f64;

/// Cosine similarity of nodes `i` and `j` given their features and norms,
/// rounded to [`COSINE_RESOLUTION`].
#[inline]
pub fn cosine_score(i: usize, j: usize, fi: &[f64], fj: &[f64], ni: f64, nj: f64) -> f64 {
    if i == j {
        return 1.0;
    }
    if ni == 0.0 || nj == 0.0 {
        return 0.0;
    }
    let dot: f64 = fi.iter().zip(fj).map(|(a, b)| a * b).sum();
    (dot / (ni * nj) / COSINE_RESOLUTION).round() * COSINE_RESOLUTION
}

/// `S[i][j] = |m_i − m_j|`, row-major `N×N`.
pub fn density_similarity(m: &[f64]) -> Vec<f64> {
    m.iter().flat_map(|&mi| m.iter().map(move |&mj| density_score(mi, mj))).collect()
}

/// Cosine similarity between the rows of an `N×C` row-major matrix. A row
/// with zero norm scores 0 against every other row and 1 against itself;
/// the number of such rows is returned alongside.
pub fn representation_similarity(f: &[f64], n: usize, c: usize) -> Result<(Vec<f64>, usize)> {
    if f.len() != n * c {
        return Err(Error::Invariant(format!("feature matrix has {} values, expected {n}x{c}", f.len())));
    }
    let norms = row_norms(f, c);
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(cosine_score(i, j, &f[i * c..(i + 1) * c], &f[j * c..(j + 1) * c], norms[i], norms[j]));
        }
    }
    Ok((out, norms.iter().filter(|v| **v == 0.0).count()))
}

fn row_norms(f: &[f64], c: usize) -> Vec<f64> {
    f.chunks(c).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::Config(format!("K must satisfy 1 <= K < N, got K={k}, N={n}")));
    }
    Ok(())
}

/// Indices of row `i`'s `k` best non-self scores plus `i`, sorted ascending.
/// Equal scores prefer the lower index.
fn select_row(i: usize, scores: &[f64], k: usize, dir: Direction) -> Vec<usize> {
    let better = |a: &usize, b: &usize| -> Ordering {
        let by_score = match dir {
            Direction::Smallest => scores[*a].total_cmp(&scores[*b]),
            Direction::Largest => scores[*b].total_cmp(&scores[*a]),
        };
        by_score.then(a.cmp(b))
    };
    let mut cand: Vec<usize> = (0..scores.len()).filter(|&j| j != i).collect();
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, better);
        cand.truncate(k);
    }
    cand.push(i);
    cand.sort_unstable();
    cand
}

/// Top-`k` neighbors per row of a dense row-major `N×N` score matrix, with
/// self excluded from the selection and then added as a self-loop.
pub fn topk_adjacency(score: &[f64], n: usize, k: usize, dir: Direction) -> Result<Vec<Vec<usize>>> {
    if score.len() != n * n {
        return Err(Error::Invariant(format!("score matrix has {} values, expected {n}x{n}", score.len())));
    }
    check_k(k, n)?;
    Ok((0..n).map(|i| select_row(i, &score[i * n..(i + 1) * n], k, dir)).collect())
}

fn map_dims(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Invariant(format!("{what} must be C×H×W, got {s:?}"))),
    }
}

/// Transposes a `C×H×W` map into the `N×C` node-feature layout.
pub fn flatten_nodes(f: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = map_dims(f, "feature map")?;
    let n = h * w;
    let mut out = vec![0.0; n * c];
    for (ch, plane) in f.data().chunks(n).enumerate() {
        for (i, v) in plane.iter().enumerate() {
            out[i * c + ch] = *v;
        }
    }
    Ok((out, n, c))
}

/// Density-driven graph: cells linked to the `k` cells whose predicted
/// density differs least.
pub fn build_dsg(f: &Tensor, m: &Tensor, cfg: &GraphConfig) -> Result<SemanticGraph> {
    let (_, h, w) = map_dims(f, "feature map")?;
    let (mc, mh, mw) = map_dims(m, "density map")?;
    if mc != 1 || (mh, mw) != (h, w) {
        return Err(Error::Invariant(format!(
            "density map {:?} is not aligned with feature map {:?}",
            m.shape(),
            f.shape()
        )));
    }
    let n = h * w;
    check_k(cfg.k, n)?;
    let md = m.data();
    let mut rows = Vec::with_capacity(n);
    let mut block = vec![0.0; ROW_BLOCK.min(n) * n];
    for start in (0..n).step_by(ROW_BLOCK) {
        let end = (start + ROW_BLOCK).min(n);
        for i in start..end {
            let row = &mut block[(i - start) * n..(i - start + 1) * n];
            for (j, s) in row.iter_mut().enumerate() {
                *s = density_score(md[i], md[j]);
            }
        }
        for i in start..end {
            rows.push(select_row(i, &block[(i - start) * n..(i - start + 1) * n], cfg.k, Direction::Smallest));
        }
    }
    Ok(SemanticGraph { kind: GraphKind::Density, height: h, width: w, k: cfg.k, rows, degenerate_rows: 0 })
}

/// Representation-driven graph: cells linked to the `k` cells with the
/// highest cosine feature similarity.
pub fn build_rsg(f: &Tensor, cfg: &GraphConfig) -> Result<SemanticGraph> {
    let (_, h, w) = map_dims(f, "feature map")?;
    let (flat, n, c) = flatten_nodes(f)?;
    check_k(cfg.k, n)?;
    let norms = row_norms(&flat, c);
    let mut rows = Vec::with_capacity(n);
    let mut block = vec![0.0; ROW_BLOCK.min(n) * n];
    for start in (0..n).step_by(ROW_BLOCK) {
        let end = (start + ROW_BLOCK).min(n);
        for i in start..end {
            let fi = &flat[i * c..(i + 1) * c];
            let row = &mut block[(i - start) * n..(i - start + 1) * n];
            for (j, s) in row.iter_mut().enumerate() {
                *s = cosine_score(i, j, fi, &flat[j * c..(j + 1) * c], norms[i], norms[j]);
            }
        }
        for i in start..end {
            rows.push(select_row(i, &block[(i - start) * n..(i - start + 1) * n], cfg.k, Direction::Largest));
        }
    }
    Ok(SemanticGraph {
        kind: GraphKind::Representation,
        height: h,
        width: w,
        k: cfg.k,
        rows,
        degenerate_rows: norms.iter().filter(|v| **v == 0.0).count(),
    })
}
