//! Benchmarks live in `benches/`; this library only holds shared fixtures.

use crowdgraph::config::ExperimentConfig;

/// A reduced model configuration that keeps one training step in the
/// low-millisecond range.
pub fn small_config(side: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone.stage_channels = [8, 16, 32];
    cfg.backbone.fused_channels = 32;
    cfg.density.hidden_channels = 32;
    cfg.scene.height = side;
    cfg.scene.width = side;
    cfg.augment.enabled = false;
    cfg
}
