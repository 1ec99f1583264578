use crowdgraph::config::{Ablation, ExperimentConfig};
use crowdgraph::experiment::{self, EvalMetrics};
use crowdgraph::Error;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.backbone.stage_channels = [4, 6, 8];
    cfg.backbone.convs_per_stage = 1;
    cfg.backbone.fused_channels = 8;
    cfg.density.hidden_channels = 8;
    cfg.density.blocks = 1;
    cfg.scene.height = 32;
    cfg.scene.width = 32;
    cfg.scene.count_min = 2;
    cfg.scene.count_max = 6;
    cfg.augment.enabled = false;
    cfg.data.train_scenes = 3;
    cfg.data.eval_scenes = 2;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 2;
    cfg.train.micro_batch = 1;
    cfg.train.lr = 1e-3;
    cfg
}

#[test]
fn training_is_bitwise_reproducible() {
    let cfg = tiny();
    let a = experiment::train(&cfg, |_| {}).unwrap();
    let b = experiment::train(&cfg, |_| {}).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.store.snapshot(), b.store.snapshot());
    assert_eq!(a.report.epochs_run, 2);
    // 3 scenes in batches of 2 → 2 steps per epoch
    assert_eq!(a.report.optimizer_steps, 4);
    assert!(a.report.epochs.iter().all(|e| e.l_joint.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    a.write_artifacts(dir.path()).unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    b.write_artifacts(dir_b.path()).unwrap();
    for f in ["checkpoint.bin", "train_log.csv", "report.json", "eval_counts.csv"] {
        let x = std::fs::read(dir.path().join(f)).unwrap();
        let y = std::fs::read(dir_b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,L_density,L_cls,L_loc,L_joint\n"));
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn different_seeds_give_different_weights() {
    let mut cfg = tiny();
    cfg.train.epochs = 1;
    let a = experiment::train(&cfg, |_| {}).unwrap();
    cfg.seed = 1;
    let b = experiment::train(&cfg, |_| {}).unwrap();
    assert_ne!(a.store.snapshot(), b.store.snapshot());
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let mut cfg = tiny();
    cfg.train.epochs = 1;
    let out = experiment::train(&cfg, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.write_artifacts(dir.path()).unwrap();
    let path = dir.path().join("checkpoint.bin");

    let (model, mut store) = experiment::load_checkpoint(&path, Some(&cfg)).unwrap();
    let scenes = experiment::scenes_for(&cfg, &experiment::split_seeds(cfg.data.eval_seed_base, 2));
    let m = experiment::evaluate(&model, &mut store, &scenes).unwrap();
    assert_eq!(Some(&m), out.eval_metrics.as_ref());

    let mut other = cfg.clone();
    other.graph.k = 3;
    assert!(matches!(experiment::load_checkpoint(&path, Some(&other)), Err(Error::Checkpoint(_))));
    assert!(matches!(
        experiment::load_checkpoint(&dir.path().join("missing.bin"), None),
        Err(Error::Checkpoint(_))
    ));
    std::fs::write(dir.path().join("junk.bin"), b"not a checkpoint").unwrap();
    assert!(matches!(
        experiment::load_checkpoint(&dir.path().join("junk.bin"), None),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn counts_csv_recomputes_metrics() {
    let mut cfg = tiny();
    cfg.train.epochs = 1;
    let out = experiment::train(&cfg, |_| {}).unwrap();
    let m = out.eval_metrics.unwrap();
    let back = EvalMetrics::from_counts_csv(&m.counts_csv()).unwrap();
    assert_eq!(back, m);
}

#[test]
fn early_stop_respects_target() {
    let mut cfg = tiny();
    cfg.train.epochs = 4;
    cfg.train.check_every = 1;
    cfg.train.target_train_mae = Some(f64::INFINITY);
    let out = experiment::train(&cfg, |_| {}).unwrap();
    assert!(out.report.reached_target);
    assert_eq!(out.report.epochs_run, 1);
    assert!(out.report.train.is_some());
}

#[test]
fn sweep_rejects_k_not_below_node_count() {
    let cfg = tiny();
    // 32×32 at stride 8 → 16 nodes
    let r = experiment::sweep_k(&cfg, &[2, 16], |_| {});
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn graph_dump_emits_both_graphs_for_every_variant() {
    for (_, a) in Ablation::variants() {
        let mut cfg = tiny();
        cfg.ablation = a;
        let (model, mut store) = crowdgraph::model::Model::new(&cfg).unwrap();
        let dump = experiment::graph_dump(&model, &mut store, 5).unwrap();
        for name in ["dsg.json", "rsg.json"] {
            let v: serde_json::Value = serde_json::from_slice(dump.get(name).unwrap()).unwrap();
            assert_eq!(v["n"], 16);
            assert_eq!(v["k"], 4);
            assert_eq!(v["rows"].as_array().unwrap().len(), 16);
        }
        assert!(dump.get("density.pgm").unwrap().starts_with(b"P2"));
        assert!(dump.get("scene.ppm").unwrap().starts_with(b"P6"));
    }
}

#[test]
fn median_of_even_and_odd() {
    assert_eq!(experiment::median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(experiment::median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = tiny();
    cfg.train.lr = 0.0;
    let (_, before) = crowdgraph::model::Model::new(&cfg).unwrap();
    let out = experiment::train(&cfg, |_| {}).unwrap();
    for (a, b) in before.params().iter().zip(out.store.params()) {
        assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
    }
}

#[test]
fn untrained_heads_count_every_proposal() {
    let mut cfg = tiny();
    cfg.train.epochs = 0;
    let out = experiment::train(&cfg, |_| {}).unwrap();
    // 4 reference points on each of the 4×4 cells
    let m = out.eval_metrics.unwrap();
    assert!(m.images.iter().all(|r| r.pred_count == 64));
}

#[test]
fn ablation_baseline_row_matches_a_plain_run() {
    let mut cfg = tiny();
    cfg.train.epochs = 1;
    let report = experiment::ablate(&cfg, &[3], |_, _, _| {}).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["baseline", "+dp", "+dp&da", "+ra", "all"]);
    cfg.ablation = Ablation::BASELINE;
    cfg.seed = 3;
    let plain = experiment::train(&cfg, |_| {}).unwrap();
    let row = report.row("baseline").unwrap();
    assert_eq!(row.mae, vec![plain.report.eval.unwrap().mae]);
    assert_eq!(row.params, plain.report.params.active);
    let full = report.row("all").unwrap();
    let da = plain.report.params.density_branch;
    assert!(full.params - row.params > da && da > 0);
}
