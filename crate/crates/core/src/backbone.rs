//! Three-stage CNN feature extractor and path-aggregation pyramid fusion.
//!
//! Each stage halves the resolution with 2×2 average pooling and then applies
//! `convs_per_stage` conv-BN-ReLU blocks, giving maps at strides 2, 4 and 8.
//! Fusion projects every level to `fused_channels` with 1×1 convolutions,
//! runs a top-down pass (nearest upsampling + addition) and a bottom-up pass
//! (stride-2 3×3 convolutions + addition), and returns the stride-8 level.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv, ConvBnRelu, Mode};
use crate::params::{ParamGroup, ParamId, ParamStore};

pub const STAGE_STRIDES: [usize; 3] = [2, 4, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 3],
    pub convs_per_stage: usize,
    pub fused_channels: usize,
    /// Output stride of the fused map. Fixed at 8 by the three pooling stages.
    pub stride: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: [16, 32, 64],
            convs_per_stage: 2,
            fused_channels: 64,
            stride: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride != STAGE_STRIDES[2] {
            return Err(Error::Config(format!(
                "backbone.stride must be {} for three pooling stages, got {}",
                STAGE_STRIDES[2], self.stride
            )));
        }
        if self.convs_per_stage == 0 || self.fused_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::Config("backbone channel and conv counts must be positive".into()));
        }
        Ok(())
    }
}

/// A `C×H×W` (or `B×C×H×W`) activation together with its stride in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureMap {
    pub var: Var,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    stages: Vec<Vec<ConvBnRelu>>,
}

impl Backbone {
    pub fn register(store: &mut ParamStore, cfg: &BackboneConfig, seed: u64) -> Self {
        let mut cin = 3;
        let mut stages = Vec::new();
        for (s, &cout) in cfg.stage_channels.iter().enumerate() {
            let mut convs = Vec::new();
            for i in 0..cfg.convs_per_stage {
                let name = format!("backbone.stage{}.conv{i}", s + 1);
                convs.push(ConvBnRelu::register(store, &name, ParamGroup::Backbone, cin, cout, seed));
                cin = cout;
            }
            stages.push(convs);
        }
        Backbone { cfg: cfg.clone(), stages }
    }

    /// Multi-scale features at strides 2, 4 and 8 from a `3×H×W` or
    /// `B×3×H×W` image whose spatial dims are multiples of 8.
    pub fn extract_features(&self, tape: &mut Tape, store: &mut ParamStore, image: Var, mode: Mode) -> Result<[FeatureMap; 3]> {
        let shape = tape.shape(image).to_vec();
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let s = self.cfg.stride;
        if h % s != 0 || w % s != 0 {
            return Err(Error::Input(format!("image {h}x{w} is not a multiple of stride {s}; pad it first")));
        }
        let channel_axis = shape.len() - 3;
        if shape[channel_axis] != 3 {
            return Err(Error::Input(format!("expected 3 image channels, got shape {shape:?}")));
        }
        let mut x = image;
        let mut out = Vec::with_capacity(3);
        for (stage, &stride) in self.stages.iter().zip(&STAGE_STRIDES) {
            x = tape.avgpool2(x)?;
            for block in stage {
                x = block.forward(tape, store, x, mode)?;
            }
            out.push(FeatureMap { var: x, stride });
        }
        Ok([out[0], out[1], out[2]])
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.stages.iter().flatten().flat_map(|b| b.params()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct PaFpn {
    channels: usize,
    lateral: Vec<Conv>,
    down: Vec<Conv>,
}

impl PaFpn {
    pub fn register(store: &mut ParamStore, cfg: &BackboneConfig, seed: u64) -> Self {
        let c = cfg.fused_channels;
        let lateral = cfg
            .stage_channels
            .iter()
            .enumerate()
            .map(|(i, &cin)| {
                let name = format!("fpn.lateral{}", i + 1);
                Conv::register(store, &name, ParamGroup::Fpn, cin, c, 1, ConvGeometry::symmetric(1, 0), true, 1.0, seed)
            })
            .collect();
        // Stride-2 3×3 with one row/column of padding on the leading side:
        // even H maps exactly to H/2.
        let geo = ConvGeometry { stride: 2, pad: [1, 0, 1, 0] };
        let down = (0..2)
            .map(|i| {
                let name = format!("fpn.down{}", i + 1);
                Conv::register(store, &name, ParamGroup::Fpn, c, c, 3, geo, true, 1.0, seed)
            })
            .collect();
        PaFpn { channels: c, lateral, down }
    }

    /// Fuses stride-2/4/8 maps into a single stride-8 map of `fused_channels`.
    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, feats: &[FeatureMap; 3]) -> Result<FeatureMap> {
        let strides: Vec<usize> = feats.iter().map(|f| f.stride).collect();
        if strides != STAGE_STRIDES {
            return Err(Error::Invariant(format!("fusion expects strides 2/4/8, got {strides:?}")));
        }
        let mut lat = Vec::with_capacity(3);
        for (conv, f) in self.lateral.iter().zip(feats) {
            let l = conv.forward(tape, store, f.var)?;
            let shape = tape.shape(l);
            if shape[shape.len() - 3] != self.channels {
                return Err(Error::Invariant(format!("lateral output has shape {shape:?}")));
            }
            lat.push(l);
        }
        // top-down
        let p3 = lat[2];
        let up3 = tape.upsample_nearest(p3, 2)?;
        let p2 = tape.add(lat[1], up3)?;
        let up2 = tape.upsample_nearest(p2, 2)?;
        let p1 = tape.add(lat[0], up2)?;
        // bottom-up
        let d1 = self.down[0].forward(tape, store, p1)?;
        let d1 = tape.relu(d1);
        let n2 = tape.add(p2, d1)?;
        let d2 = self.down[1].forward(tape, store, n2)?;
        let d2 = tape.relu(d2);
        let n3 = tape.add(p3, d2)?;
        Ok(FeatureMap { var: n3, stride: STAGE_STRIDES[2] })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.lateral.iter().chain(&self.down).flat_map(|c| c.params()).collect()
    }
}

/// Reflect-pads a `3×H×W` image on the bottom and right to the next multiple
/// of `stride`. Annotations are unaffected.
pub fn reflect_pad(data: &[f64], channels: usize, h: usize, w: usize, stride: usize) -> (Vec<f64>, usize, usize) {
    let ph = h.div_ceil(stride) * stride;
    let pw = w.div_ceil(stride) * stride;
    let reflect = |i: usize, n: usize| -> usize {
        if i < n {
            i
        } else if n == 1 {
            0
        } else {
            // mirror without repeating the edge sample
            let period = 2 * (n - 1);
            let m = i % period;
            if m < n { m } else { period - m }
        }
    };
    let mut out = vec![0.0; channels * ph * pw];
    for c in 0..channels {
        for y in 0..ph {
            let sy = reflect(y, h);
            for x in 0..pw {
                out[(c * ph + y) * pw + x] = data[(c * h + sy) * w + reflect(x, w)];
            }
        }
    }
    (out, ph, pw)
}
