//! The named gradient-check suite: every differentiable operation, every
//! module with parameters, both losses and the end-to-end joint objective.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::fd::{
    finite_difference_check, finite_difference_check_params, random_projection, random_tensor, FdOptions, FdReport,
    FD_TOLERANCE,
};
use crate::autodiff::{BatchNormMode, ConvGeometry, RunningStats, Tape, Var};
use crate::backbone::{Backbone, BackboneConfig, PaFpn};
use crate::config::ExperimentConfig;
use crate::density::{gt_density_map, DensityHead, DensityHeadConfig};
use crate::error::Result;
use crate::gcn::{GcnBranch, GcnConfig};
use crate::graph::{build_rsg, GraphConfig};
use crate::layers::Mode;
use crate::loss::{density_loss, joint_loss, point_loss, LossConfig};
use crate::model::{stack, Model};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::points::{PointHead, PointHeadConfig, PointOutputs};
use crate::sparse::CsrMatrix;
use crate::tensor::Tensor;

pub const DEFAULT_SEEDS: u64 = 10;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    /// `op` for single operations, `module` for composites.
    pub kind: &'static str,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    pub entries: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub checks: Vec<CheckOutcome>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            writeln!(
                out,
                "{} {:<22} {:<6} seeds={} entries={} max_rel_err={:.3e} worst_seed={}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.kind,
                c.seeds,
                c.entries,
                c.max_rel_err,
                c.worst_seed
            )
            .unwrap();
        }
        let failed = self.failures().len();
        writeln!(
            out,
            "{} checks, {} failed, tolerance {:e}, {:.1}s",
            self.checks.len(),
            failed,
            self.tolerance,
            self.seconds
        )
        .unwrap();
        out
    }
}

type CheckFn = fn(u64, Option<&'static str>) -> Result<FdReport>;

fn merge(a: FdReport, b: FdReport) -> FdReport {
    FdReport { max_rel_err: a.max_rel_err.max(b.max_rel_err), checked: a.checked + b.checked }
}

fn opts(seed: u64, fault: Option<&'static str>, max_entries: Option<usize>) -> FdOptions {
    FdOptions { max_entries, seed, fault }
}

fn rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9) ^ salt)
}

fn op_check(
    seed: u64,
    fault: Option<&'static str>,
    shapes: &[&[usize]],
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<FdReport> {
    let mut r = rng(seed, shapes.len() as u64);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s, &mut r)).collect();
    finite_difference_check(&inputs, f, opts(seed, fault, None))
}

/// Projects to a scalar with seed-dependent weights.
fn proj(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    random_projection(t, y, seed)
}

fn randomize(store: &mut ParamStore, ids: &[ParamId], r: &mut ChaCha8Rng, scale: f64) {
    for &id in ids {
        let t = random_tensor(store.tensor(id).shape(), r);
        for (dst, src) in store.tensor_mut(id).data_mut().iter_mut().zip(t.data()) {
            *dst = scale * src;
        }
    }
}

fn checks() -> Vec<(&'static str, &'static str, CheckFn)> {
    vec![
        ("add", "op", |s, f| op_check(s, f, &[&[3, 4], &[3, 4]], |t, v| { let y = t.add(v[0], v[1])?; proj(t, y, s) })),
        ("sub", "op", |s, f| op_check(s, f, &[&[3, 4], &[3, 4]], |t, v| { let y = t.sub(v[0], v[1])?; proj(t, y, s) })),
        ("mul", "op", |s, f| op_check(s, f, &[&[3, 4], &[3, 4]], |t, v| { let y = t.mul(v[0], v[1])?; proj(t, y, s) })),
        ("scale", "op", |s, f| op_check(s, f, &[&[5]], |t, v| { let y = t.scale(v[0], -1.7); proj(t, y, s) })),
        ("add_scalar", "op", |s, f| op_check(s, f, &[&[5]], |t, v| { let y = t.add_scalar(v[0], 0.3); let y = t.mul(y, y)?; proj(t, y, s) })),
        ("sum", "op", |s, f| op_check(s, f, &[&[2, 3]], |t, v| { let y = t.sum(v[0]); Ok(t.mul(y, y)?) })),
        ("mean", "op", |s, f| op_check(s, f, &[&[2, 3]], |t, v| { let y = t.mean(v[0]); Ok(t.mul(y, y)?) })),
        ("relu", "op", |s, f| op_check(s, f, &[&[4, 4]], |t, v| { let y = t.relu(v[0]); proj(t, y, s) })),
        ("sigmoid", "op", |s, f| op_check(s, f, &[&[6]], |t, v| { let y = t.sigmoid(v[0]); proj(t, y, s) })),
        ("log_floor", "op", |s, f| op_check(s, f, &[&[6]], |t, v| { let y = t.add_scalar(v[0], 1.5); let y = t.log_floor(y, 1e-12); proj(t, y, s) })),
        ("matmul", "op", |s, f| op_check(s, f, &[&[3, 4], &[4, 2]], |t, v| { let y = t.matmul(v[0], v[1])?; proj(t, y, s) })),
        ("transpose", "op", |s, f| op_check(s, f, &[&[3, 4]], |t, v| { let y = t.transpose(v[0])?; proj(t, y, s) })),
        ("reshape", "op", |s, f| op_check(s, f, &[&[3, 4]], |t, v| { let y = t.reshape(v[0], &[2, 6])?; proj(t, y, s) })),
        ("conv2d", "op", |s, f| op_check(s, f, &[&[2, 2, 5, 5], &[3, 2, 3, 3]], |t, v| { let y = t.conv2d(v[0], v[1], 1, 1)?; proj(t, y, s) })),
        ("conv2d_stride2", "op", |s, f| op_check(s, f, &[&[2, 6, 6], &[2, 2, 3, 3]], |t, v| {
            let y = t.conv2d_with(v[0], v[1], ConvGeometry { stride: 2, pad: [1, 0, 1, 0] })?;
            proj(t, y, s)
        })),
        ("channel_bias", "op", |s, f| op_check(s, f, &[&[2, 3, 3], &[2]], |t, v| { let y = t.channel_bias(v[0], v[1])?; proj(t, y, s) })),
        ("batchnorm2d_train", "op", |s, f| op_check(s, f, &[&[2, 3, 4, 4], &[3], &[3]], |t, v| {
            let mut stats = RunningStats::identity(3);
            let y = t.batchnorm2d(v[0], v[1], v[2], BatchNormMode::Train(&mut stats))?;
            proj(t, y, s)
        })),
        ("batchnorm2d_eval", "op", |s, f| op_check(s, f, &[&[3, 4, 4], &[3], &[3]], |t, v| {
            let stats = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] };
            let y = t.batchnorm2d(v[0], v[1], v[2], BatchNormMode::Eval(&stats))?;
            proj(t, y, s)
        })),
        ("upsample_nearest", "op", |s, f| op_check(s, f, &[&[2, 3, 3]], |t, v| { let y = t.upsample_nearest(v[0], 2)?; proj(t, y, s) })),
        ("avgpool2", "op", |s, f| op_check(s, f, &[&[2, 4, 6]], |t, v| { let y = t.avgpool2(v[0])?; proj(t, y, s) })),
        ("spmm", "op", |s, f| {
            let mut r = rng(s, 77);
            let n = 5;
            let rows: Vec<Vec<(usize, f64)>> = (0..n)
                .map(|i| {
                    let mut row = vec![(i, r.random_range(0.1..1.0))];
                    let j = (i + 1 + r.random_range(0..n - 1)) % n;
                    row.push((j, r.random_range(-1.0..1.0)));
                    row
                })
                .collect();
            let adj = Arc::new(CsrMatrix::from_rows(n, &rows)?);
            op_check(s, f, &[&[n, 3]], move |t, v| { let y = t.spmm(adj.clone(), v[0])?; proj(t, y, s) })
        }),
        ("gather", "op", |s, f| op_check(s, f, &[&[8]], |t, v| { let y = t.gather(v[0], vec![0, 3, 3, 7, 5])?; proj(t, y, s) })),
        ("select_batch", "op", |s, f| op_check(s, f, &[&[3, 2, 2, 2]], |t, v| { let y = t.select_batch(v[0], 1)?; proj(t, y, s) })),
        ("backbone_fpn", "module", check_backbone_fpn),
        ("density_head", "module", check_density_head),
        ("gcn_branch", "module", check_gcn),
        ("point_heads", "module", check_point_heads),
        ("density_loss", "module", check_density_loss),
        ("point_loss", "module", check_point_loss),
        ("joint_end_to_end", "module", check_end_to_end),
    ]
}

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig { stage_channels: [2, 3, 4], convs_per_stage: 1, fused_channels: 3, stride: 8 }
}

fn check_backbone_fpn(seed: u64, fault: Option<&'static str>) -> Result<FdReport> {
    let cfg = tiny_backbone();
    let mut store = ParamStore::new();
    let b = Backbone::register(&mut store, &cfg, seed);
    let fpn = PaFpn::register(&mut store, &cfg, seed);
    let mut r = rng(seed, 1);
    randomize(&mut store, &fpn.params(), &mut r, 0.5);
    let img = random_tensor(&[2, 3, 16, 16], &mut r);
    let run = |t: &mut Tape, s: &mut ParamStore, x: Var| -> Result<Var> {
        let feats = b.extract_features(t, s, x, Mode::Train)?;
        let fused = fpn.fuse(t, s, &feats)?;
        proj(t, fused.var, seed)
    };
    let input = finite_difference_check(
        std::slice::from_ref(&img),
        |t, v| run(t, &mut store.clone(), v[0]),
        opts(seed, fault, Some(24)),
    )?;
    let mut ids = b.params();
    ids.extend(fpn.params());
    let params = finite_difference_check_params(
        &store,
        &ids,
        |t, s| {
            let x = t.constant(img.clone());
            run(t, s, x)
        },
        opts(seed, fault, Some(4)),
    )?;
    Ok(merge(input, params))
}

fn check_density_head(seed: u64, fault: Option<&'static str>) -> Result<FdReport> {
    let cfg = DensityHeadConfig { blocks: 2, hidden_channels: 3, sigma: 2.0 };
    let mut store = ParamStore::new();
    let head = DensityHead::register(&mut store, &cfg, 4, seed);
    let mut r = rng(seed, 2);
    let x = random_tensor(&[2, 4, 3, 3], &mut r);
    let input = finite_difference_check(
        std::slice::from_ref(&x),
        |t, v| {
            let m = head.predict(t, &mut store.clone(), v[0], Mode::Train)?;
            proj(t, m, seed)
        },
        opts(seed, fault, None),
    )?;
    let params = finite_difference_check_params(
        &store,
        &head.params(),
        |t, s| {
            let x = t.constant(x.clone());
            let m = head.predict(t, s, x, Mode::Train)?;
            proj(t, m, seed)
        },
        opts(seed, fault, Some(6)),
    )?;
    Ok(merge(input, params))
}

fn check_gcn(seed: u64, fault: Option<&'static str>) -> Result<FdReport> {
    let c = 3;
    let mut store = ParamStore::new();
    let cfg = GcnConfig { layers: 2, final_layer_gain: 1.0 };
    let branch = GcnBranch::register(&mut store, "gcn", ParamGroup::RepresentationBranch, c, &cfg, seed);
    let mut r = rng(seed, 3);
    let f = random_tensor(&[c, 3, 4], &mut r);
    let graph = build_rsg(&f, &GraphConfig { k: 3 })?;
    let input = finite_difference_check(
        std::slice::from_ref(&f),
        |t, v| {
            let y = branch.forward(t, &store, &graph, v[0])?;
            proj(t, y, seed)
        },
        opts(seed, fault, None),
    )?;
    let params = finite_difference_check_params(
        &store,
        &branch.layers,
        |t, s| {
            let x = t.constant(f.clone());
            let y = branch.forward(t, s, &graph, x)?;
            proj(t, y, seed)
        },
        opts(seed, fault, None),
    )?;
    Ok(merge(input, params))
}

fn check_point_heads(seed: u64, fault: Option<&'static str>) -> Result<FdReport> {
    let mut store = ParamStore::new();
    let head = PointHead::register(&mut store, &PointHeadConfig::default(), 3, seed);
    let mut r = rng(seed, 4);
    randomize(&mut store, &head.params(), &mut r, 0.7);
    let x = random_tensor(&[3, 2, 3], &mut r);
    let run = |t: &mut Tape, s: &ParamStore, x: Var| -> Result<Var> {
        let out = head.forward(t, s, x, 8)?;
        let a = proj(t, out.dx, seed)?;
        let b = proj(t, out.dy, seed + 1)?;
        let c = proj(t, out.conf, seed + 2)?;
        let ab = t.add(a, b)?;
        t.add(ab, c)
    };
    let input = finite_difference_check(std::slice::from_ref(&x), |t, v| run(t, &store, v[0]), opts(seed, fault, None))?;
    let params = finite_difference_check_params(
        &store,
        &head.params(),
        |t, s| {
            let xv = t.constant(x.clone());
            run(t, s, xv)
        },
        opts(seed, fault, Some(6)),
    )?;
    Ok(merge(input, params))
}

fn check_density_loss(seed: u64, fault: Option<&'static str>) -> Result<FdReport> {
    op_check(seed, fault, &[&[1, 3, 4], &[1, 3, 4]], |t, v| density_loss(t, v[0], v[1]))
}

fn random_points(r: &mut ChaCha8Rng, n: usize, w: f64, h: f64) -> Vec<(f64, f64)> {
    (0..n).map(|_| (r.random_range(0.0..w), r.random_range(0.0..h))).collect()
}

fn check_point_loss(seed: u64, fault: Option<&'static str>) -> Result<FdReport> {
    let mut r = rng(seed, 5);
    let m = 8;
    let anchors: Vec<(f64, f64)> = (0..m).map(|k| ((k % 4) as f64 * 4.0 + 2.0, (k / 4) as f64 * 4.0 + 2.0)).collect();
    // seed 0 covers the empty-annotation case
    let n_gt = if seed == 0 { 0 } else { r.random_range(1..=4) };
    let gt = random_points(&mut r, n_gt, 16.0, 8.0);
    let dx = random_tensor(&[m], &mut r);
    let dy = random_tensor(&[m], &mut r);
    let logits = random_tensor(&[m], &mut r);
    let cfg = LossConfig { lambda1: r.random_range(0.05..1.0), ..Default::default() };
    let pred = crate::points::PointPrediction {
        anchors: anchors.clone(),
        dx: dx.data().to_vec(),
        dy: dy.data().to_vec(),
        conf: logits.data().iter().map(|&z| crate::autodiff::sigmoid(z)).collect(),
    };
    let xi = pred.match_to(&gt, 0.4)?;
    finite_difference_check(
        &[dx, dy, logits],
        |t, v| {
            let conf = t.sigmoid(v[2]);
            let out = PointOutputs { anchors: anchors.clone(), dx: v[0], dy: v[1], conf };
            Ok(point_loss(t, &out, &gt, &xi, &cfg)?.total)
        },
        opts(seed, fault, None),
    )
}

/// Full model, all branches on, with the matching and both graphs held at
/// the values they take at the unperturbed parameters.
fn check_end_to_end(seed: u64, fault: Option<&'static str>) -> Result<FdReport> {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.backbone = tiny_backbone();
    cfg.density.blocks = 1;
    cfg.density.hidden_channels = 3;
    cfg.graph.k = 2;
    cfg.gcn.final_layer_gain = 1.0;
    cfg.scene.height = 24;
    cfg.scene.width = 24;
    cfg.augment.enabled = false;
    let (model, mut store) = Model::new(&cfg)?;
    let mut r = rng(seed, 6);
    randomize(&mut store, &model.head.params(), &mut r, 0.5);
    let img = stack(&[&random_tensor(&[3, 24, 24], &mut r)])?;
    let n_gt = r.random_range(1..=5);
    let gt = random_points(&mut r, n_gt, 24.0, 24.0);
    let gt_map = gt_density_map(&gt, 24, 24, 8, cfg.density.sigma)?;
    let tau = cfg.points.tau_per_stride * 8.0;
    let (xi, graphs) = {
        let mut t = Tape::new();
        let fwd = model.forward(&mut t, &mut store.clone(), img.clone(), Mode::Train)?;
        let graphs = vec![(fwd[0].dsg.clone(), fwd[0].rsg.clone())];
        (fwd[0].points.values(&t).match_to(&gt, tau)?, graphs)
    };
    let ids: Vec<ParamId> = store
        .ids()
        .filter(|id| model.active_groups().contains(&store.param(*id).group))
        .collect();
    finite_difference_check_params(
        &store,
        &ids,
        |t, s| {
            let fwd = model.forward_with_graphs(t, s, img.clone(), Mode::Train, Some(&graphs))?;
            let f = &fwd[0];
            let target = t.constant(gt_map.clone());
            let d = density_loss(t, f.density.expect("density head on"), target)?;
            let p = point_loss(t, &f.points, &gt, &xi, &cfg.loss)?;
            joint_loss(t, p.total, d)
        },
        opts(seed, fault, Some(2)),
    )
}

/// Names of every check, in run order.
pub fn check_names() -> Vec<&'static str> {
    checks().into_iter().map(|(n, _, _)| n).collect()
}

/// Runs every check over `seeds` seeds. With `fault` set, the backward rule
/// of that operation is deliberately corrupted on every tape.
pub fn run_suite(seeds: u64, fault: Option<&'static str>, mut progress: impl FnMut(&CheckOutcome)) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut out = Vec::new();
    for (name, kind, check) in checks() {
        let (mut worst, mut worst_seed, mut entries) = (0.0f64, 0, 0);
        for seed in 0..seeds {
            let rep = check(seed, fault)?;
            entries += rep.checked;
            if rep.max_rel_err > worst || rep.max_rel_err.is_nan() {
                worst = rep.max_rel_err;
                worst_seed = seed;
            }
        }
        let outcome = CheckOutcome {
            name,
            kind,
            seeds,
            max_rel_err: worst,
            worst_seed,
            entries,
            passed: worst < FD_TOLERANCE,
        };
        progress(&outcome);
        out.push(outcome);
    }
    Ok(SuiteReport { tolerance: FD_TOLERANCE, checks: out, seconds: start.elapsed().as_secs_f64() })
}
