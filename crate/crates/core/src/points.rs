//! Point proposals: an `R×R` grid of anchors per cell, a regression head for
//! pixel offsets, a classification head for confidences, and one-to-one
//! matching against annotations.

use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, Assignment};
use crate::autodiff::{sigmoid, ConvGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::Conv;
use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointHeadConfig {
    /// Anchors per cell side; each cell gets `R²` proposals.
    pub refs_per_side: usize,
    /// Confidence weight in the matching cost, as a multiple of the stride.
    pub tau_per_stride: f64,
    pub threshold: f64,
}

impl Default for PointHeadConfig {
    fn default() -> Self {
        PointHeadConfig {
            refs_per_side: 2,
            tau_per_stride: 0.05,
            threshold: 0.5,
        }
    }
}

impl PointHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refs_per_side == 0 {
            return Err(Error::Config("points.refs_per_side must be at least 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("points.threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.tau_per_stride >= 0.0) {
            return Err(Error::Config("points.tau_per_stride must be non-negative".into()));
        }
        Ok(())
    }
}

/// Anchor `(i, j, u, v)` sits at `x = j·s + (v + ½)·s/R`, `y = i·s + (u + ½)·s/R`.
/// Proposals are ordered by cell row, cell column, sub-row, sub-column.
pub fn generate_anchors(h: usize, w: usize, s: usize, r: usize) -> Vec<(f64, f64)> {
    let step = s as f64 / r as f64;
    let mut out = Vec::with_capacity(h * w * r * r);
    for i in 0..h {
        for j in 0..w {
            for u in 0..r {
                for v in 0..r {
                    out.push(((j * s) as f64 + (v as f64 + 0.5) * step, (i * s) as f64 + (u as f64 + 0.5) * step));
                }
            }
        }
    }
    out
}

/// Tape handles for one image's proposals.
#[derive(Clone, Debug)]
pub struct PointOutputs {
    pub anchors: Vec<(f64, f64)>,
    /// `[M]` offsets in pixels.
    pub dx: Var,
    pub dy: Var,
    /// `[M]` confidences in (0, 1).
    pub conf: Var,
}

impl PointOutputs {
    pub fn values(&self, tape: &Tape) -> PointPrediction {
        PointPrediction {
            anchors: self.anchors.clone(),
            dx: tape.value(self.dx).data().to_vec(),
            dy: tape.value(self.dy).data().to_vec(),
            conf: tape.value(self.conf).data().to_vec(),
        }
    }
}

/// Plain-value proposals.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPrediction {
    pub anchors: Vec<(f64, f64)>,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub conf: Vec<f64>,
}

impl PointPrediction {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn decoded(&self, k: usize) -> (f64, f64) {
        decode(self.anchors[k], (self.dx[k], self.dy[k]))
    }

    /// Number of proposals with confidence `≥ threshold` and their coordinates.
    pub fn count(&self, threshold: f64) -> (usize, Vec<(f64, f64, f64)>) {
        let kept: Vec<(f64, f64, f64)> = (0..self.len())
            .filter(|&k| self.conf[k] >= threshold)
            .map(|k| {
                let (x, y) = self.decoded(k);
                (x, y, self.conf[k])
            })
            .collect();
        (kept.len(), kept)
    }

    /// Hungarian matching of annotations to proposals with cost
    /// `‖p̂ − p‖ − τ·ĉ`.
    pub fn match_to(&self, gt: &[(f64, f64)], tau: f64) -> Result<Assignment> {
        let m = self.len();
        let mut cost = Vec::with_capacity(gt.len() * m);
        for &(gx, gy) in gt {
            for k in 0..m {
                let (px, py) = self.decoded(k);
                cost.push((px - gx).hypot(py - gy) - tau * self.conf[k]);
            }
        }
        hungarian(&cost, gt.len(), m)
    }

    /// `x,y,confidence` per kept proposal.
    pub fn to_csv(&self, threshold: f64) -> String {
        let mut out = String::from("x,y,confidence\n");
        for (x, y, c) in self.count(threshold).1 {
            out.push_str(&format!("{x},{y},{c}\n"));
        }
        out
    }
}

pub fn decode(anchor: (f64, f64), offset: (f64, f64)) -> (f64, f64) {
    (anchor.0 + offset.0, anchor.1 + offset.1)
}

pub fn count_from_confidences(conf: &[f64], threshold: f64) -> usize {
    conf.iter().filter(|c| **c >= threshold).count()
}

#[derive(Clone, Debug)]
pub struct PointHead {
    refs: usize,
    reg: Vec<Conv>,
    cls: Vec<Conv>,
}

impl PointHead {
    /// Two 3-layer conv stacks. Output layers start at zero, so an untrained
    /// head proposes the anchors themselves with confidence ½.
    pub fn register(store: &mut ParamStore, cfg: &PointHeadConfig, channels: usize, seed: u64) -> Self {
        let r2 = cfg.refs_per_side * cfg.refs_per_side;
        let stack = |store: &mut ParamStore, name: &str, out: usize| -> Vec<Conv> {
            (0..3)
                .map(|l| {
                    let (cout, gain) = if l == 2 { (out, 0.0) } else { (channels, 1.0) };
                    Conv::register(
                        store,
                        &format!("points.{name}{l}"),
                        ParamGroup::PointHead,
                        channels,
                        cout,
                        3,
                        ConvGeometry::symmetric(1, 1),
                        true,
                        gain,
                        seed,
                    )
                })
                .collect()
        };
        let reg = stack(store, "reg", 2 * r2);
        let cls = stack(store, "cls", r2);
        PointHead { refs: cfg.refs_per_side, reg, cls }
    }

    fn run(stack: &[Conv], tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut x = x;
        for (l, conv) in stack.iter().enumerate() {
            x = conv.forward(tape, store, x)?;
            if l + 1 < stack.len() {
                x = tape.relu(x);
            }
        }
        Ok(x)
    }

    /// Proposals for one `C×H×W` fused map at the given stride.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var, stride: usize) -> Result<PointOutputs> {
        let shape = tape.shape(f).to_vec();
        let [_, h, w] = shape[..] else {
            return Err(Error::Invariant(format!("point head input must be C×H×W, got {shape:?}")));
        };
        let reg = Self::run(&self.reg, tape, store, f)?;
        let cls = Self::run(&self.cls, tape, store, f)?;
        let r = self.refs;
        let plane = h * w;
        let (mut ix, mut iy, mut ic) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..h {
            for j in 0..w {
                for u in 0..r {
                    for v in 0..r {
                        let c = u * r + v;
                        let cell = i * w + j;
                        ix.push(2 * c * plane + cell);
                        iy.push((2 * c + 1) * plane + cell);
                        ic.push(c * plane + cell);
                    }
                }
            }
        }
        let dx = tape.gather(reg, ix)?;
        let dx = tape.scale(dx, stride as f64);
        let dy = tape.gather(reg, iy)?;
        let dy = tape.scale(dy, stride as f64);
        let logits = tape.gather(cls, ic)?;
        let conf = tape.sigmoid(logits);
        Ok(PointOutputs { anchors: generate_anchors(h, w, stride, r), dx, dy, conf })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.reg.iter().chain(&self.cls).flat_map(|c| c.params()).collect()
    }
}

/// Confidence of a zero logit; the untrained head's output everywhere.
pub fn untrained_confidence() -> f64 {
    sigmoid(0.0)
}
