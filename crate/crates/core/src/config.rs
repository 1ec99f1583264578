//! Experiment configuration: one JSON document, every field defaulted,
//! unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::density::DensityHeadConfig;
use crate::error::{Error, Result};
use crate::gcn::GcnConfig;
use crate::graph::GraphConfig;
use crate::loss::LossConfig;
use crate::points::PointHeadConfig;
use crate::synth::{AugmentConfig, SceneConfig};

/// Which optional modules are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Density prediction head and its loss.
    pub use_dp: bool,
    /// Density-driven graph branch; needs the density head.
    pub use_da: bool,
    /// Representation-driven graph branch.
    pub use_ra: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

impl Ablation {
    pub const BASELINE: Ablation = Ablation { use_dp: false, use_da: false, use_ra: false };
    pub const DP: Ablation = Ablation { use_dp: true, use_da: false, use_ra: false };
    pub const DP_DA: Ablation = Ablation { use_dp: true, use_da: true, use_ra: false };
    pub const RA: Ablation = Ablation { use_dp: false, use_da: false, use_ra: true };
    pub const FULL: Ablation = Ablation { use_dp: true, use_da: true, use_ra: true };

    /// The five rows of the component ablation, in reporting order.
    pub fn variants() -> [(&'static str, Ablation); 5] {
        [
            ("baseline", Self::BASELINE),
            ("+dp", Self::DP),
            ("+dp&da", Self::DP_DA),
            ("+ra", Self::RA),
            ("all", Self::FULL),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Scene `i` of a split uses seed `base + i`.
    pub train_seed_base: u64,
    pub eval_seed_base: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_scenes: 64,
            eval_scenes: 50,
            train_seed_base: 0,
            eval_seed_base: 1_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Images per optimizer step (gradients accumulated).
    pub batch_size: usize,
    /// Images per forward pass; normalization statistics are shared across
    /// one micro-batch.
    pub micro_batch: usize,
    pub lr: f64,
    /// Learning-rate multiplier for the backbone group.
    pub backbone_lr_scale: f64,
    /// Stop once training-set MAE (eval mode, no augmentation) reaches this.
    pub target_train_mae: Option<f64>,
    /// When set together with `target_train_mae`, stopping also needs every
    /// training image's density-map sum within this relative error of its
    /// count.
    pub target_density_rel_err: Option<f64>,
    /// Epoch interval for the training-set check above.
    pub check_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            micro_batch: 8,
            lr: 1e-4,
            backbone_lr_scale: 0.1,
            target_train_mae: None,
            target_density_rel_err: None,
            check_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub density: DensityHeadConfig,
    pub graph: GraphConfig,
    pub gcn: GcnConfig,
    pub points: PointHeadConfig,
    pub loss: LossConfig,
    pub scene: SceneConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            backbone: BackboneConfig::default(),
            density: DensityHeadConfig::default(),
            graph: GraphConfig::default(),
            gcn: GcnConfig::default(),
            points: PointHeadConfig::default(),
            loss: LossConfig::default(),
            scene: SceneConfig::default(),
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON of the resolved configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Feature-map side lengths seen during training and evaluation.
    pub fn grid_sizes(&self) -> Vec<(usize, usize)> {
        let s = self.backbone.stride;
        let mut out = vec![(self.scene.height.div_ceil(s), self.scene.width.div_ceil(s))];
        if self.augment.enabled {
            out.push((self.augment.crop / s, self.augment.crop / s));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.density.validate()?;
        self.gcn.validate()?;
        self.points.validate()?;
        self.loss.validate()?;
        self.scene.validate()?;
        self.augment.validate(&self.scene, self.backbone.stride)?;
        if self.ablation.use_da && !self.ablation.use_dp {
            return Err(Error::Config("ablation.use_da requires ablation.use_dp".into()));
        }
        if self.graph.k == 0 {
            return Err(Error::Config("graph.k must be at least 1".into()));
        }
        if self.ablation.use_da || self.ablation.use_ra {
            for (h, w) in self.grid_sizes() {
                if self.graph.k >= h * w {
                    return Err(Error::Config(format!(
                        "graph.k ({}) must be smaller than the {} cells of a {h}x{w} feature map",
                        self.graph.k,
                        h * w
                    )));
                }
            }
        }
        let t = &self.train;
        if t.batch_size == 0 || t.micro_batch == 0 || t.micro_batch > t.batch_size {
            return Err(Error::Config("train.micro_batch must lie in 1..=train.batch_size".into()));
        }
        if !(t.lr >= 0.0) || !(t.backbone_lr_scale >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if t.check_every == 0 {
            return Err(Error::Config("train.check_every must be at least 1".into()));
        }
        if self.data.train_scenes == 0 {
            return Err(Error::Config("data.train_scenes must be at least 1".into()));
        }
        Ok(())
    }
}
