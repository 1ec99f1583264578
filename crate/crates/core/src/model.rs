//! The full counting network and its per-image training objective.

use crate::autodiff::{Tape, Var};
use crate::backbone::{Backbone, PaFpn};
use crate::config::{Ablation, ExperimentConfig};
use crate::density::{gt_density_map, DensityHead};
use crate::error::{Error, Result};
use crate::gcn::{fuse_features, GcnBranch};
use crate::graph::{build_dsg, build_rsg, SemanticGraph};
use crate::layers::Mode;
use crate::loss::{density_loss, joint_loss, point_loss};
use crate::params::{ParamGroup, ParamStore};
use crate::points::{PointHead, PointOutputs};
use crate::tensor::Tensor;

/// Every module is registered regardless of the ablation switches, so the
/// parameter layout depends only on the architecture. Disabled modules
/// simply never appear on the tape.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ExperimentConfig,
    pub backbone: Backbone,
    pub fpn: PaFpn,
    pub density: DensityHead,
    pub da: GcnBranch,
    pub ra: GcnBranch,
    pub head: PointHead,
}

/// Forward results for one image of a batch.
#[derive(Clone, Debug)]
pub struct ImageForward {
    /// Fused `C×H×W` features before graph enhancement.
    pub features: Var,
    pub density: Option<Var>,
    pub dsg: Option<SemanticGraph>,
    pub rsg: Option<SemanticGraph>,
    pub points: PointOutputs,
}

#[derive(Clone, Copy, Debug)]
pub struct ImageLoss {
    pub density: Var,
    pub cls: Var,
    pub loc: Var,
    pub joint: Var,
}

impl Model {
    pub fn new(cfg: &ExperimentConfig) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let seed = cfg.seed;
        let c = cfg.backbone.fused_channels;
        let backbone = Backbone::register(&mut store, &cfg.backbone, seed);
        let fpn = PaFpn::register(&mut store, &cfg.backbone, seed);
        let density = DensityHead::register(&mut store, &cfg.density, c, seed);
        let da = GcnBranch::register(&mut store, "gcn.density", ParamGroup::DensityBranch, c, &cfg.gcn, seed);
        let ra = GcnBranch::register(&mut store, "gcn.representation", ParamGroup::RepresentationBranch, c, &cfg.gcn, seed);
        let head = PointHead::register(&mut store, &cfg.points, c, seed);
        let model = Model { cfg: cfg.clone(), backbone, fpn, density, da, ra, head };
        Ok((model, store))
    }

    pub fn ablation(&self) -> Ablation {
        self.cfg.ablation
    }

    pub fn stride(&self) -> usize {
        self.cfg.backbone.stride
    }

    /// Parameter groups that take part in the forward pass.
    pub fn active_groups(&self) -> Vec<ParamGroup> {
        let a = self.ablation();
        let mut g = vec![ParamGroup::Backbone, ParamGroup::Fpn, ParamGroup::PointHead];
        if a.use_dp {
            g.push(ParamGroup::DensityHead);
        }
        if a.use_da {
            g.push(ParamGroup::DensityBranch);
        }
        if a.use_ra {
            g.push(ParamGroup::RepresentationBranch);
        }
        g
    }

    /// `images` is `B×3×H×W` with `H`, `W` multiples of the stride.
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, images: Tensor, mode: Mode) -> Result<Vec<ImageForward>> {
        self.forward_with_graphs(tape, store, images, mode, None)
    }

    /// Like [`Model::forward`], but with the semantic graphs of each image
    /// supplied instead of built from the current values. Graph construction
    /// has no gradient, so this is the same function locally; gradient
    /// checks use it to keep the top-K selection fixed under perturbation.
    pub fn forward_with_graphs(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        images: Tensor,
        mode: Mode,
        graphs: Option<&[(Option<SemanticGraph>, Option<SemanticGraph>)]>,
    ) -> Result<Vec<ImageForward>> {
        if images.shape().len() != 4 {
            return Err(Error::Input(format!("expected a B×3×H×W batch, got {:?}", images.shape())));
        }
        let batch = images.shape()[0];
        let a = self.ablation();
        let x = tape.constant(images);
        let feats = self.backbone.extract_features(tape, store, x, mode)?;
        let fused = self.fpn.fuse(tape, store, &feats)?;
        let density = if a.use_dp {
            Some(self.density.predict(tape, store, fused.var, mode)?)
        } else {
            None
        };
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let f = tape.select_batch(fused.var, b)?;
            let m = density.map(|d| tape.select_batch(d, b)).transpose()?;
            let (dsg, rsg) = match graphs {
                Some(g) => g
                    .get(b)
                    .cloned()
                    .ok_or_else(|| Error::Invariant(format!("no graphs supplied for image {b}")))?,
                None => {
                    let dsg = match (a.use_da, m) {
                        (true, Some(m)) => Some(build_dsg(tape.value(f), tape.value(m), &self.cfg.graph)?),
                        _ => None,
                    };
                    let rsg = if a.use_ra { Some(build_rsg(tape.value(f), &self.cfg.graph)?) } else { None };
                    (dsg, rsg)
                }
            };
            if dsg.is_some() != a.use_da || rsg.is_some() != a.use_ra {
                return Err(Error::Invariant("supplied graphs do not match the active branches".into()));
            }
            let fd = dsg.as_ref().map(|g| self.da.forward(tape, store, g, f)).transpose()?;
            let fr = rsg.as_ref().map(|g| self.ra.forward(tape, store, g, f)).transpose()?;
            let enhanced = fuse_features(tape, f, fd, fr)?;
            let points = self.head.forward(tape, store, enhanced, fused.stride)?;
            out.push(ImageForward { features: f, density: m, dsg, rsg, points });
        }
        Ok(out)
    }

    /// Joint loss for one image with annotations `gt` (pixel coordinates in
    /// the network input).
    pub fn loss(&self, tape: &mut Tape, fwd: &ImageForward, gt: &[(f64, f64)], h: usize, w: usize) -> Result<ImageLoss> {
        let density = match fwd.density {
            Some(m) => {
                let target = gt_density_map(gt, h, w, self.stride(), self.cfg.density.sigma)?;
                let target = tape.constant(target);
                density_loss(tape, m, target)?
            }
            None => tape.constant(Tensor::scalar(0.0)),
        };
        let pred = fwd.points.values(tape);
        let tau = self.cfg.points.tau_per_stride * self.stride() as f64;
        let xi = pred.match_to(gt, tau)?;
        let pl = point_loss(tape, &fwd.points, gt, &xi, &self.cfg.loss)?;
        let joint = joint_loss(tape, pl.total, density)?;
        Ok(ImageLoss { density, cls: pl.cls, loc: pl.loc, joint })
    }
}

/// Stacks `3×H×W` images into one `B×3×H×W` tensor.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Usage("cannot stack an empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::dim("stack", &shape, img.shape()));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::new(&full, data)
}
