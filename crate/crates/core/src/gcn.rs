//! Graph convolution over semantic graphs: `H' = ReLU(Â H W)` with
//! `Â = D^{-1/2} A D^{-1/2}` and `D_ii = Σ_j A_ij`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::SemanticGraph;
use crate::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::sparse::CsrMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcnConfig {
    pub layers: usize,
    /// Init gain of each branch's last layer. With 0 the branch outputs
    /// exactly zero at start, but ReLU then blocks every gradient into it.
    pub final_layer_gain: f64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig {
            layers: 2,
            final_layer_gain: 0.1,
        }
    }
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("gcn.layers must be at least 1".into()));
        }
        if !(self.final_layer_gain >= 0.0) {
            return Err(Error::Config("gcn.final_layer_gain must be non-negative".into()));
        }
        Ok(())
    }
}

/// Symmetrically normalized adjacency. Degrees are row sums, used for both
/// the row and the column factor even when `A` is not symmetric.
pub fn normalize_adjacency(rows: &[Vec<usize>]) -> Result<CsrMatrix> {
    let deg: Vec<f64> = rows.iter().map(|r| r.len() as f64).collect();
    if let Some(i) = deg.iter().position(|d| *d == 0.0) {
        return Err(Error::Invariant(format!("adjacency row {i} is empty; self-loop missing")));
    }
    let entries: Vec<Vec<(usize, f64)>> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| r.iter().map(|&j| (j, 1.0 / (deg[i] * deg[j]).sqrt())).collect())
        .collect();
    CsrMatrix::from_rows(rows.len(), &entries)
}

/// One stack of GCN layers. The two branches are registered separately and
/// share nothing.
#[derive(Clone, Debug)]
pub struct GcnBranch {
    pub group: ParamGroup,
    pub layers: Vec<ParamId>,
}

impl GcnBranch {
    pub fn register(store: &mut ParamStore, name: &str, group: ParamGroup, channels: usize, cfg: &GcnConfig, seed: u64) -> Self {
        let layers = (0..cfg.layers)
            .map(|l| {
                let gain = if l + 1 == cfg.layers { cfg.final_layer_gain } else { 1.0 };
                let init = if gain == 0.0 {
                    Init::Zeros
                } else {
                    Init::FanInUniform { fan_in: channels, gain }
                };
                store.register(&format!("{name}.layer{l}.weight"), group, &[channels, channels], init, seed)
            })
            .collect();
        GcnBranch { group, layers }
    }

    /// Propagates an `N×C` node matrix through every layer.
    pub fn propagate(&self, tape: &mut Tape, store: &ParamStore, adj: &Arc<CsrMatrix>, h: Var) -> Result<Var> {
        let mut h = h;
        for &w in &self.layers {
            let w = tape.param(store, w);
            let hw = tape.matmul(h, w)?;
            let ahw = tape.spmm(adj.clone(), hw)?;
            h = tape.relu(ahw);
        }
        Ok(h)
    }

    /// `C×H×W` map in, `C×H×W` map out, with node `i = y·W + x`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, graph: &SemanticGraph, f: Var) -> Result<Var> {
        let shape = tape.shape(f).to_vec();
        let [c, h, w] = shape[..] else {
            return Err(Error::Invariant(format!("branch input must be C×H×W, got {shape:?}")));
        };
        if graph.n() != h * w || (graph.height, graph.width) != (h, w) {
            return Err(Error::Invariant(format!(
                "graph has {} nodes ({}x{}) but feature map is {h}x{w}",
                graph.n(),
                graph.height,
                graph.width
            )));
        }
        let adj = Arc::new(normalize_adjacency(&graph.rows)?);
        let nodes = flatten(tape, f)?;
        let out = self.propagate(tape, store, &adj, nodes)?;
        unflatten(tape, out, c, h, w)
    }
}

/// `C×H×W` → `N×C`.
pub fn flatten(tape: &mut Tape, f: Var) -> Result<Var> {
    let shape = tape.shape(f).to_vec();
    let cn = tape.reshape(f, &[shape[0], shape[1] * shape[2]])?;
    tape.transpose(cn)
}

/// `N×C` → `C×H×W`.
pub fn unflatten(tape: &mut Tape, nodes: Var, c: usize, h: usize, w: usize) -> Result<Var> {
    let cn = tape.transpose(nodes)?;
    tape.reshape(cn, &[c, h, w])
}

/// `F + F_d + F_r`, skipping disabled branches.
pub fn fuse_features(tape: &mut Tape, f: Var, fd: Option<Var>, fr: Option<Var>) -> Result<Var> {
    let mut out = f;
    for extra in [fd, fr].into_iter().flatten() {
        out = tape.add(out, extra)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd::{finite_difference_check, random_projection, random_tensor, FdOptions, FD_TOLERANCE};
    use crate::graph::{build_rsg, GraphConfig, GraphKind};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_normalized(rows: &[Vec<usize>]) -> Vec<f64> {
        let n = rows.len();
        let mut a = vec![0.0; n * n];
        for (i, r) in rows.iter().enumerate() {
            for &j in r {
                a[i * n + j] = 1.0;
            }
        }
        let d: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
        (0..n * n).map(|ij| a[ij] / (d[ij / n] * d[ij % n]).sqrt()).collect()
    }

    fn dense_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn normalization_examples() {
        let eye = normalize_adjacency(&[vec![0], vec![1]]).unwrap();
        assert_eq!(eye.to_dense(), vec![1.0, 0.0, 0.0, 1.0]);
        let full = normalize_adjacency(&[vec![0, 1], vec![0, 1]]).unwrap();
        assert_eq!(full.to_dense(), vec![0.5; 4]);
        assert!(matches!(normalize_adjacency(&[vec![0], vec![]]), Err(Error::Invariant(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = build_rsg(&random_tensor(&[3, 4, 4], &mut rng), &GraphConfig { k: 4 }).unwrap();
        let got = normalize_adjacency(&g.rows).unwrap().to_dense();
        let want = dense_normalized(&g.rows);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        for i in 0..16 {
            assert!((got[i * 17] - 1.0 / g.rows[i].len() as f64).abs() < 1e-15);
        }
    }

    fn layer(store: &mut ParamStore, w: Vec<f64>, c: usize) -> GcnBranch {
        let id = store.register("w", ParamGroup::DensityBranch, &[c, c], Init::Zeros, 0);
        store.tensor_mut(id).data_mut().copy_from_slice(&w);
        GcnBranch { group: ParamGroup::DensityBranch, layers: vec![id] }
    }

    #[test]
    fn layer_examples() {
        let mut store = ParamStore::new();
        let b = layer(&mut store, vec![2.0, 0.0, 0.0, -3.0], 2);
        let adj = Arc::new(normalize_adjacency(&[vec![0], vec![1]]).unwrap());
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::eye(2));
        let out = b.propagate(&mut tape, &store, &adj, h).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 0.0, 0.0, 0.0]);

        let mut store = ParamStore::new();
        let b = layer(&mut store, vec![0.0; 4], 2);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::full(&[2, 2], 3.0));
        let out = b.propagate(&mut tape, &store, &adj, h).unwrap();
        assert!(tape.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn nine_node_layer_matches_dense_oracle_and_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = build_rsg(&random_tensor(&[2, 3, 3], &mut rng), &GraphConfig { k: 3 }).unwrap();
        let adj = Arc::new(normalize_adjacency(&g.rows).unwrap());
        let h = random_tensor(&[9, 4], &mut rng);
        let w = random_tensor(&[4, 4], &mut rng);
        let mut store = ParamStore::new();
        let b = layer(&mut store, w.data().to_vec(), 4);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let out = b.propagate(&mut tape, &store, &adj, hv).unwrap();
        let ah = dense_mm(&dense_normalized(&g.rows), h.data(), 9, 9, 4);
        let want: Vec<f64> = dense_mm(&ah, w.data(), 9, 4, 4).into_iter().map(|v| v.max(0.0)).collect();
        for (a, b) in tape.value(out).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let report = finite_difference_check(
            &[h, w],
            |t, v| {
                let hw = t.matmul(v[0], v[1])?;
                let a = t.spmm(adj.clone(), hw)?;
                let r = t.relu(a);
                random_projection(t, r, 5)
            },
            FdOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < FD_TOLERANCE, "{report:?}");
    }

    #[test]
    fn identity_graph_is_a_per_node_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let w = random_tensor(&[3, 3], &mut rng);
        let b = layer(&mut store, w.data().to_vec(), 3);
        let f = random_tensor(&[3, 2, 2], &mut rng);
        let g = SemanticGraph::identity(GraphKind::Density, 2, 2);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let out = b.forward(&mut tape, &store, &g, fv).unwrap();
        for i in 0..4 {
            for co in 0..3 {
                let v: f64 = (0..3).map(|ci| f.data()[ci * 4 + i] * w.data()[ci * 3 + co]).sum();
                assert!((tape.value(out).data()[co * 4 + i] - v.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flatten_round_trip_and_node_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_tensor(&[3, 2, 4], &mut rng);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let n = flatten(&mut tape, fv).unwrap();
        // node (y=1, x=2) → index 6, channel 2
        assert_eq!(tape.value(n).at(&[6, 2]), f.at(&[2, 1, 2]));
        let back = unflatten(&mut tape, n, 3, 2, 4).unwrap();
        assert_eq!(tape.value(back).data(), f.data());
    }

    #[test]
    fn branch_rejects_mismatched_graph() {
        let mut store = ParamStore::new();
        let b = GcnBranch::register(&mut store, "g", ParamGroup::DensityBranch, 2, &GcnConfig::default(), 0);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[2, 3, 3]));
        let g = SemanticGraph::identity(GraphKind::Density, 2, 2);
        assert!(matches!(b.forward(&mut tape, &store, &g, f), Err(Error::Invariant(_))));
    }

    #[test]
    fn fusion_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(&[2, 2, 2], &mut rng);
        let mut tape = Tape::new();
        let f = tape.leaf(x.clone().with_requires_grad(true));
        let z = tape.constant(Tensor::zeros(&[2, 2, 2]));
        let out = fuse_features(&mut tape, f, Some(z), Some(z)).unwrap();
        assert_eq!(tape.value(out).data(), x.data());

        let zero = tape.constant(Tensor::zeros(&[2, 2, 2]));
        let xd = tape.leaf(x.clone().with_requires_grad(true));
        let xr = tape.leaf(x.clone().with_requires_grad(true));
        let out2 = fuse_features(&mut tape, zero, Some(xd), Some(xr)).unwrap();
        let twice: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.value(out2).data(), &twice[..]);

        let s1 = tape.sum(out);
        let s2 = tape.sum(out2);
        let loss = tape.add(s1, s2).unwrap();
        tape.backward(loss).unwrap();
        for v in [f, xd, xr] {
            assert!(tape.grad(v).unwrap().iter().all(|g| *g == 1.0));
        }
    }

    #[test]
    fn zero_final_layer_reproduces_baseline() {
        let cfg = GcnConfig { layers: 2, final_layer_gain: 0.0 };
        let mut store = ParamStore::new();
        let bd = GcnBranch::register(&mut store, "d", ParamGroup::DensityBranch, 3, &cfg, 1);
        let br = GcnBranch::register(&mut store, "r", ParamGroup::RepresentationBranch, 3, &cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = random_tensor(&[3, 3, 3], &mut rng);
        let g = build_rsg(&f, &GraphConfig { k: 2 }).unwrap();
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let fd = bd.forward(&mut tape, &store, &g, fv).unwrap();
        let fr = br.forward(&mut tape, &store, &g, fv).unwrap();
        let out = fuse_features(&mut tape, fv, Some(fd), Some(fr)).unwrap();
        assert_eq!(tape.value(out).data(), f.data());
    }

    #[test]
    fn branch_gradient_matches_finite_differences() {
        let cfg = GcnConfig::default();
        let mut store = ParamStore::new();
        let b = GcnBranch::register(&mut store, "b", ParamGroup::RepresentationBranch, 3, &cfg, 2);
        let w0 = store.tensor(b.layers[0]).clone().with_requires_grad(false);
        let w1 = store.tensor(b.layers[1]).clone().with_requires_grad(false);
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_tensor(&[3, 4, 4], &mut rng);
            let g = build_rsg(&f, &GraphConfig { k: 4 }).unwrap();
            let adj = Arc::new(normalize_adjacency(&g.rows).unwrap());
            let report = finite_difference_check(
                &[f, w0.clone(), w1.clone()],
                |t, v| {
                    let mut h = flatten(t, v[0])?;
                    for w in &v[1..] {
                        let hw = t.matmul(h, *w)?;
                        let a = t.spmm(adj.clone(), hw)?;
                        h = t.relu(a);
                    }
                    let out = unflatten(t, h, 3, 4, 4)?;
                    random_projection(t, out, seed)
                },
                FdOptions { seed, ..Default::default() },
            )
            .unwrap();
            assert!(report.max_rel_err < FD_TOLERANCE, "seed {seed}: {report:?}");
        }
    }
}
