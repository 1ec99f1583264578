//! Density MSE, matched point loss, and their sum.

use serde::{Deserialize, Serialize};

use crate::assignment::Assignment;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::points::PointOutputs;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the localization term.
    pub lambda1: f64,
    /// Weight of the negative-proposal classification term.
    pub lambda2: f64,
    pub log_floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 2e-4,
            lambda2: 0.5,
            log_floor: 1e-12,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.log_floor > 0.0 && self.log_floor < 1.0) {
            return Err(Error::Config("loss.log_floor must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-cell mean of squared differences.
pub fn density_loss(tape: &mut Tape, m: Var, m_gt: Var) -> Result<Var> {
    let d = tape.sub(m, m_gt)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

#[derive(Clone, Copy, Debug)]
pub struct PointLoss {
    pub cls: Var,
    pub loc: Var,
    pub total: Var,
}

/// Classification over all `M` proposals (matched ones pushed towards 1,
/// the rest towards 0 with weight λ2) plus λ1 times the mean squared
/// distance between annotations and their matched proposals. The matching
/// is a constant here.
pub fn point_loss(tape: &mut Tape, out: &PointOutputs, gt: &[(f64, f64)], xi: &Assignment, cfg: &LossConfig) -> Result<PointLoss> {
    let m = out.anchors.len();
    if xi.cols != m || xi.row_to_col.len() != gt.len() {
        return Err(Error::Invariant(format!(
            "assignment covers {} annotations over {} proposals; expected {} over {m}",
            xi.row_to_col.len(),
            xi.cols,
            gt.len()
        )));
    }
    let matched = xi.matched_mask();
    let pos_w = Tensor::from_fn(&[m], |k| if matched[k] { 1.0 } else { 0.0 });
    let neg_w = Tensor::from_fn(&[m], |k| if matched[k] { 0.0 } else { cfg.lambda2 });

    let log_c = tape.log_floor(out.conf, cfg.log_floor);
    let neg_c = tape.scale(out.conf, -1.0);
    let one_minus = tape.add_scalar(neg_c, 1.0);
    let log_1mc = tape.log_floor(one_minus, cfg.log_floor);
    let pos_w = tape.constant(pos_w);
    let neg_w = tape.constant(neg_w);
    let pos = tape.mul(log_c, pos_w)?;
    let pos = tape.sum(pos);
    let neg = tape.mul(log_1mc, neg_w)?;
    let neg = tape.sum(neg);
    let both = tape.add(pos, neg)?;
    let cls = tape.scale(both, -1.0 / m as f64);

    let loc = if gt.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let idx = xi.row_to_col.clone();
        let dx = tape.gather(out.dx, idx.clone())?;
        let dy = tape.gather(out.dy, idx.clone())?;
        // p̂ − p = Δ − (p − anchor)
        let tx = Tensor::from_fn(&[gt.len()], |i| gt[i].0 - out.anchors[idx[i]].0);
        let ty = Tensor::from_fn(&[gt.len()], |i| gt[i].1 - out.anchors[idx[i]].1);
        let tx = tape.constant(tx);
        let ty = tape.constant(ty);
        let ex = tape.sub(dx, tx)?;
        let ey = tape.sub(dy, ty)?;
        let ex2 = tape.mul(ex, ex)?;
        let ey2 = tape.mul(ey, ey)?;
        let s = tape.add(ex2, ey2)?;
        let s = tape.sum(s);
        tape.scale(s, 1.0 / gt.len() as f64)
    };
    let weighted = tape.scale(loc, cfg.lambda1);
    let total = tape.add(cls, weighted)?;
    Ok(PointLoss { cls, loc, total })
}

pub fn joint_loss(tape: &mut Tape, point: Var, density: Var) -> Result<Var> {
    tape.add(point, density)
}
