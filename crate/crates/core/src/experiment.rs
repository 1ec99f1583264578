//! Training, evaluation and the experiment drivers built on them.
//!
//! Everything here is sequential and seeded, so a configuration determines
//! every output bit for bit. Wall-clock time is measured but kept out of
//! the reports for that reason.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::reflect_pad;
use crate::config::{Ablation, ExperimentConfig};
use crate::density;
use crate::error::{Error, Result};
use crate::graph::{build_dsg, build_rsg};
use crate::layers::Mode;
use crate::model::{stack, Model};
use crate::optim::AdamState;
use crate::params::{ParamGroup, ParamStore};
use crate::synth::{augment, generate_scene, mae_mse, Scene};
use crate::tensor::Tensor;

const SHUFFLE_SALT: u64 = 0x5eed_0f_da7a;

pub fn split_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base + i).collect()
}

/// Scene image reflect-padded to a multiple of `stride`; annotations are
/// unchanged because padding is appended bottom/right.
pub fn network_input(scene: &Scene, stride: usize) -> Tensor {
    let (h, w) = (scene.height(), scene.width());
    let (data, ph, pw) = reflect_pad(scene.image.data(), 3, h, w, stride);
    Tensor::new(&[3, ph, pw], data).expect("padded image")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_density: f64,
    pub l_cls: f64,
    pub l_loc: f64,
    pub l_joint: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub seed: u64,
    pub gt_count: usize,
    pub pred_count: usize,
    /// Sum of the predicted density map, when the density head is active.
    pub density_sum: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mae: f64,
    /// Root mean squared count error (called MSE in the counting literature).
    pub mse: f64,
    pub images: Vec<ImageRecord>,
}

impl EvalMetrics {
    pub fn from_records(images: Vec<ImageRecord>) -> Result<Self> {
        let pred: Vec<f64> = images.iter().map(|r| r.pred_count as f64).collect();
        let gt: Vec<f64> = images.iter().map(|r| r.gt_count as f64).collect();
        let (mae, mse) = mae_mse(&pred, &gt)?;
        Ok(EvalMetrics { mae, mse, images })
    }

    pub fn counts_csv(&self) -> String {
        let mut out = String::from("seed,gt_count,pred_count,density_sum\n");
        for r in &self.images {
            let d = r.density_sum.map(|v| format!("{v:?}")).unwrap_or_default();
            writeln!(out, "{},{},{},{d}", r.seed, r.gt_count, r.pred_count).unwrap();
        }
        out
    }

    /// Recomputes MAE/MSE from a CSV written by [`EvalMetrics::counts_csv`].
    pub fn from_counts_csv(text: &str) -> Result<Self> {
        let mut images = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Input(format!("bad counts row {line:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            images.push(ImageRecord {
                seed: f[0].parse().map_err(|_| bad())?,
                gt_count: f[1].parse().map_err(|_| bad())?,
                pred_count: f[2].parse().map_err(|_| bad())?,
                density_sum: if f[3].is_empty() { None } else { Some(f[3].parse().map_err(|_| bad())?) },
            });
        }
        Self::from_records(images)
    }

    /// Largest `|density sum − count| / count` over images with a density
    /// map and at least one person.
    pub fn max_density_rel_err(&self) -> Option<f64> {
        self.images
            .iter()
            .filter(|r| r.gt_count > 0)
            .filter_map(|r| r.density_sum.map(|d| (d - r.gt_count as f64).abs() / r.gt_count as f64))
            .reduce(f64::max)
    }

    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            mae: self.mae,
            mse: self.mse,
            images: self.images.len(),
            max_density_rel_err: self.max_density_rel_err(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mae: f64,
    pub mse: f64,
    pub images: usize,
    pub max_density_rel_err: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub active: usize,
    pub total: usize,
    pub backbone: usize,
    pub fpn: usize,
    pub density_head: usize,
    pub density_branch: usize,
    pub representation_branch: usize,
    pub point_head: usize,
}

impl ParamCounts {
    pub fn of(model: &Model, store: &ParamStore) -> Self {
        let c = |g| store.count(&[g]);
        ParamCounts {
            active: store.count(&model.active_groups()),
            total: store.params().iter().map(|p| p.tensor.numel()).sum(),
            backbone: c(ParamGroup::Backbone),
            fpn: c(ParamGroup::Fpn),
            density_head: c(ParamGroup::DensityHead),
            density_branch: c(ParamGroup::DensityBranch),
            representation_branch: c(ParamGroup::RepresentationBranch),
            point_head: c(ParamGroup::PointHead),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub ablation: Ablation,
    pub epochs_run: usize,
    pub optimizer_steps: u64,
    pub reached_target: bool,
    pub epochs: Vec<EpochLog>,
    pub params: ParamCounts,
    /// Training split, eval mode, no augmentation.
    pub train: Option<MetricSummary>,
    /// Held-out split.
    pub eval: Option<MetricSummary>,
}

impl RunReport {
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,L_density,L_cls,L_loc,L_joint\n");
        for e in &self.epochs {
            writeln!(out, "{},{:?},{:?},{:?},{:?}", e.epoch, e.l_density, e.l_cls, e.l_loc, e.l_joint).unwrap();
        }
        out
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore,
    pub report: RunReport,
    pub train_metrics: Option<EvalMetrics>,
    pub eval_metrics: Option<EvalMetrics>,
    pub seconds: f64,
}

impl TrainOutcome {
    pub fn checkpoint_metadata(&self) -> serde_json::Value {
        checkpoint_metadata(&self.model.cfg)
    }

    /// Writes `checkpoint.bin`, `train_log.csv`, `report.json`,
    /// `eval_counts.csv` and `timing.json` into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.store.save(&dir.join("checkpoint.bin"), self.checkpoint_metadata())?;
        std::fs::write(dir.join("train_log.csv"), self.report.log_csv())?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)? + "\n")?;
        if let Some(m) = &self.eval_metrics {
            std::fs::write(dir.join("eval_counts.csv"), m.counts_csv())?;
        }
        let timing = serde_json::json!({ "wall_clock_seconds": self.seconds });
        std::fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)? + "\n")?;
        Ok(())
    }
}

fn checkpoint_metadata(cfg: &ExperimentConfig) -> serde_json::Value {
    serde_json::json!({
        "config_hash": cfg.hash(),
        "config": cfg,
    })
}

/// Loads a checkpoint together with the configuration stored in it. When
/// `expected` is given its hash must match the stored one.
pub fn load_checkpoint(path: &Path, expected: Option<&ExperimentConfig>) -> Result<(Model, ParamStore)> {
    let io = |e: Error| match e {
        Error::Io(e) => Error::Checkpoint(format!("cannot read {}: {e}", path.display())),
        other => other,
    };
    let meta = crate::params::read_checkpoint_metadata(path).map_err(io)?;
    let stored_hash = meta["config_hash"].as_str().unwrap_or_default().to_string();
    let cfg: ExperimentConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("checkpoint config unreadable: {e}")))?;
    if cfg.hash() != stored_hash {
        return Err(Error::Checkpoint("checkpoint config does not match its recorded hash".into()));
    }
    if let Some(exp) = expected {
        if exp.hash() != stored_hash {
            return Err(Error::Checkpoint(format!(
                "config hash {} does not match checkpoint hash {stored_hash}",
                exp.hash()
            )));
        }
    }
    let (model, mut store) = Model::new(&cfg).map_err(|e| Error::Checkpoint(format!("checkpoint config invalid: {e}")))?;
    store.load(path).map_err(io)?;
    Ok((model, store))
}

/// Counts (and density sums) for the given scenes, eval-mode normalization,
/// no augmentation.
pub fn evaluate(model: &Model, store: &mut ParamStore, scenes: &[Scene]) -> Result<EvalMetrics> {
    let s = model.stride();
    let threshold = model.cfg.points.threshold;
    let mut records = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let mut tape = Tape::new();
        let input = stack(&[&network_input(scene, s)])?;
        let fwd = model.forward(&mut tape, store, input, Mode::Eval)?;
        let f = &fwd[0];
        let pred = f.points.values(&tape);
        records.push(ImageRecord {
            seed: scene.seed,
            gt_count: scene.count(),
            pred_count: pred.count(threshold).0,
            density_sum: f.density.map(|m| tape.value(m).sum()),
        });
    }
    EvalMetrics::from_records(records)
}

pub fn scenes_for(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<Scene> {
    seeds.iter().map(|&s| generate_scene(&cfg.scene, s)).collect()
}

#[derive(Default)]
struct LossSums {
    density: f64,
    cls: f64,
    loc: f64,
    joint: f64,
    images: usize,
}

/// Trains from scratch according to `cfg`. `progress` sees every epoch log
/// as it is produced.
pub fn train(cfg: &ExperimentConfig, mut progress: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let start = Instant::now();
    let (model, mut store) = Model::new(cfg)?;
    let s = model.stride();
    let train_scenes = scenes_for(cfg, &split_seeds(cfg.data.train_seed_base, cfg.data.train_scenes));
    let tc = &cfg.train;
    let mut adam = AdamState::new(&store, tc.lr).with_group_scale(ParamGroup::Backbone, tc.backbone_lr_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..train_scenes.len()).collect();
    let mut epochs = Vec::new();
    let mut reached_target = false;
    let mut train_metrics = None;

    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossSums::default();
        for batch in order.chunks(tc.batch_size) {
            store.zero_grads();
            let weight = 1.0 / batch.len() as f64;
            for micro in batch.chunks(tc.micro_batch) {
                let samples: Vec<Scene> = micro
                    .iter()
                    .map(|&i| {
                        let scene = &train_scenes[i];
                        if cfg.augment.enabled {
                            augment(scene, &cfg.augment, &mut rng)
                        } else {
                            Ok(scene.clone())
                        }
                    })
                    .collect::<Result<_>>()?;
                let inputs: Vec<Tensor> = samples.iter().map(|sc| network_input(sc, s)).collect();
                let (h, w) = (inputs[0].shape()[1], inputs[0].shape()[2]);
                let mut tape = Tape::new();
                let fwd = model.forward(&mut tape, &mut store, stack(&inputs.iter().collect::<Vec<_>>())?, Mode::Train)?;
                let mut total = None;
                for (f, sc) in fwd.iter().zip(&samples) {
                    let l = model.loss(&mut tape, f, &sc.points, h, w)?;
                    sums.density += tape.value(l.density).data()[0];
                    sums.cls += tape.value(l.cls).data()[0];
                    sums.loc += tape.value(l.loc).data()[0];
                    sums.joint += tape.value(l.joint).data()[0];
                    sums.images += 1;
                    let weighted = tape.scale(l.joint, weight);
                    total = Some(match total {
                        None => weighted,
                        Some(t) => tape.add(t, weighted)?,
                    });
                }
                tape.backward(total.expect("non-empty micro-batch"))?;
                store.accumulate_grads(&tape);
            }
            adam.step(&mut store)?;
        }
        let n = sums.images as f64;
        let log = EpochLog {
            epoch,
            l_density: sums.density / n,
            l_cls: sums.cls / n,
            l_loc: sums.loc / n,
            l_joint: sums.joint / n,
        };
        if !log.l_joint.is_finite() {
            return Err(Error::Invariant(format!("non-finite loss at epoch {epoch}")));
        }
        progress(&log);
        epochs.push(log);
        if let Some(target) = tc.target_train_mae {
            if epoch % tc.check_every == 0 || epoch == tc.epochs {
                let m = evaluate(&model, &mut store, &train_scenes)?;
                let density_ok = match (tc.target_density_rel_err, m.max_density_rel_err()) {
                    (Some(tol), Some(err)) => err <= tol,
                    _ => true,
                };
                let done = m.mae <= target && density_ok;
                train_metrics = Some(m);
                if done {
                    reached_target = true;
                    break;
                }
            }
        }
    }
    store.clear_grads();

    if train_metrics.is_none() && tc.target_train_mae.is_some() {
        train_metrics = Some(evaluate(&model, &mut store, &train_scenes)?);
    }
    let eval_metrics = if cfg.data.eval_scenes > 0 {
        let scenes = scenes_for(cfg, &split_seeds(cfg.data.eval_seed_base, cfg.data.eval_scenes));
        Some(evaluate(&model, &mut store, &scenes)?)
    } else {
        None
    };
    let report = RunReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        ablation: cfg.ablation,
        epochs_run: epochs.len(),
        optimizer_steps: adam.step_count(),
        reached_target,
        epochs,
        params: ParamCounts::of(&model, &store),
        train: train_metrics.as_ref().map(|m| m.summary()),
        eval: eval_metrics.as_ref().map(|m| m.summary()),
    };
    Ok(TrainOutcome {
        model,
        store,
        report,
        train_metrics,
        eval_metrics,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub ablation: Ablation,
    pub params: usize,
    pub seeds: Vec<u64>,
    pub mae: Vec<f64>,
    pub mse: Vec<f64>,
    pub median_mae: f64,
    pub median_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,use_dp,use_da,use_ra,params,seeds,MAE,MSE(RMSE)\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(|s| s.to_string()).collect();
            writeln!(
                out,
                "{},{},{},{},{},{},{:.4},{:.4}",
                r.variant,
                r.ablation.use_dp,
                r.ablation.use_da,
                r.ablation.use_ra,
                r.params,
                seeds.join(" "),
                r.median_mae,
                r.median_mse
            )
            .unwrap();
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trains and evaluates the five component variants for every seed. All
/// variants share data, seeds and every other setting.
pub fn ablate(cfg: &ExperimentConfig, seeds: &[u64], mut progress: impl FnMut(&str, u64, &MetricSummary)) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (name, ablation) in Ablation::variants() {
        let mut run_cfg = cfg.clone();
        run_cfg.ablation = ablation;
        run_cfg.validate()?;
        let (mut mae, mut mse, mut params) = (Vec::new(), Vec::new(), 0);
        for &seed in seeds {
            run_cfg.seed = seed;
            let out = train(&run_cfg, |_| {})?;
            let m = out.report.eval.ok_or_else(|| Error::Config("ablation needs data.eval_scenes > 0".into()))?;
            progress(name, seed, &m);
            mae.push(m.mae);
            mse.push(m.mse);
            params = out.report.params.active;
        }
        rows.push(AblationRow {
            variant: name.to_string(),
            ablation,
            params,
            seeds: seeds.to_vec(),
            median_mae: median(&mae),
            median_mse: median(&mse),
            mae,
            mse,
        });
    }
    Ok(AblationReport { config_hash: cfg.hash(), rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub mae: f64,
    pub mse: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("K,MAE,MSE(RMSE)\n");
    for r in rows {
        writeln!(out, "{},{:.4},{:.4}", r.k, r.mae, r.mse).unwrap();
    }
    out
}

/// One train+eval run per neighbor count, same seed and data throughout.
pub fn sweep_k(cfg: &ExperimentConfig, ks: &[usize], mut progress: impl FnMut(&SweepRow)) -> Result<Vec<SweepRow>> {
    let mut checked = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut c = cfg.clone();
        c.graph.k = k;
        c.validate()?;
        checked.push(c);
    }
    let mut rows = Vec::new();
    for c in checked {
        let out = train(&c, |_| {})?;
        let m = out.report.eval.ok_or_else(|| Error::Config("sweep needs data.eval_scenes > 0".into()))?;
        let row = SweepRow { k: c.graph.k, mae: m.mae, mse: m.mse };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

/// Files produced by [`graph_dump`], keyed by file name.
pub struct GraphDump {
    pub files: Vec<(String, Vec<u8>)>,
}

impl GraphDump {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            std::fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&[u8]> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, b)| b.as_slice())
    }
}

/// Both semantic graphs, the predicted density map and the predicted points
/// for one generated scene. Graphs are built even when the corresponding
/// branch is switched off, from the same features the model computes.
pub fn graph_dump(model: &Model, store: &mut ParamStore, scene_seed: u64) -> Result<GraphDump> {
    let scene = generate_scene(&model.cfg.scene, scene_seed);
    let mut tape = Tape::new();
    let input = stack(&[&network_input(&scene, model.stride())])?;
    let mut cfg_all = model.clone();
    cfg_all.cfg.ablation = Ablation { use_dp: true, use_da: model.ablation().use_da, use_ra: model.ablation().use_ra };
    let fwd = cfg_all.forward(&mut tape, store, input, Mode::Eval)?;
    let f = &fwd[0];
    let m = f.density.expect("density head forced on");
    let features = tape.value(f.features).clone();
    let dmap = tape.value(m).clone();
    let dsg = match &f.dsg {
        Some(g) => g.clone(),
        None => build_dsg(&features, &dmap, &model.cfg.graph)?,
    };
    let rsg = match &f.rsg {
        Some(g) => g.clone(),
        None => build_rsg(&features, &model.cfg.graph)?,
    };
    let pred = f.points.values(&tape);
    let json = |v: serde_json::Value| serde_json::to_vec_pretty(&v).map(|mut b| {
        b.push(b'\n');
        b
    });
    Ok(GraphDump {
        files: vec![
            ("dsg.json".into(), json(dsg.to_json())?),
            ("rsg.json".into(), json(rsg.to_json())?),
            ("density.pgm".into(), density::to_pgm(&dmap).into_bytes()),
            ("density.csv".into(), density::to_csv(&dmap).into_bytes()),
            ("points.csv".into(), pred.to_csv(model.cfg.points.threshold).into_bytes()),
            ("scene.ppm".into(), scene.to_ppm()),
            ("scene_points.csv".into(), scene.points_csv().into_bytes()),
        ],
    })
}
