//! Per-channel batch normalization over batch and spatial positions.

use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running mean/variance used in evaluation mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    /// Mean 0, variance 1.
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub enum BatchNormMode<'a> {
    /// Normalize with batch statistics and fold them into `running`.
    Train(&'a mut RunningStats),
    Eval(&'a RunningStats),
}

/// Saved forward quantities needed by the backward rule.
#[derive(Debug)]
pub(crate) struct BnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub train: bool,
}

/// Layout: `batch` images of `channels` planes with `plane` elements each.
pub(crate) fn bn_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    plane: usize,
    gamma: &[f64],
    beta: &[f64],
    mode: BatchNormMode<'_>,
) -> (Vec<f64>, BnSaved) {
    let count = (batch * plane) as f64;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; channels];
    let train = matches!(mode, BatchNormMode::Train(_));
    let (mean, var) = match mode {
        BatchNormMode::Train(running) => {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for c in 0..channels {
                let mut s = 0.0;
                for b in 0..batch {
                    s += x[(b * channels + c) * plane..][..plane].iter().sum::<f64>();
                }
                mean[c] = s / count;
                let mut v = 0.0;
                for b in 0..batch {
                    for &xi in &x[(b * channels + c) * plane..][..plane] {
                        v += (xi - mean[c]) * (xi - mean[c]);
                    }
                }
                var[c] = v / count;
                let unbiased = if count > 1.0 { var[c] * count / (count - 1.0) } else { var[c] };
                running.mean[c] = (1.0 - BN_MOMENTUM) * running.mean[c] + BN_MOMENTUM * mean[c];
                running.var[c] = (1.0 - BN_MOMENTUM) * running.var[c] + BN_MOMENTUM * unbiased;
            }
            (mean, var)
        }
        BatchNormMode::Eval(running) => (running.mean.clone(), running.var.clone()),
    };
    for c in 0..channels {
        inv_std[c] = 1.0 / (var[c] + BN_EPS).sqrt();
        for b in 0..batch {
            let off = (b * channels + c) * plane;
            for i in off..off + plane {
                xhat[i] = (x[i] - mean[c]) * inv_std[c];
                y[i] = gamma[c] * xhat[i] + beta[c];
            }
        }
    }
    (y, BnSaved { xhat, inv_std, train })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward(
    dy: &[f64],
    saved: &BnSaved,
    batch: usize,
    channels: usize,
    plane: usize,
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let count = (batch * plane) as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    for c in 0..channels {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for b in 0..batch {
            let off = (b * channels + c) * plane;
            for i in off..off + plane {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * saved.xhat[i];
            }
        }
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = gamma[c] * saved.inv_std[c];
        for b in 0..batch {
            let off = (b * channels + c) * plane;
            for i in off..off + plane {
                dx[i] = if saved.train {
                    scale * (dy[i] - sum_dy / count - saved.xhat[i] * sum_dy_xhat / count)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}
