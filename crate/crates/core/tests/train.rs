use dtrformer::data::{build_adjacency, Dataset, GraphPair, Split};
use dtrformer::model::ParamStore;
use dtrformer::train::{
    load_run, restore_model, synth_generate, train_and_evaluate, SynthConfig, TrainConfig, Trainer, CHECKPOINT_FILE,
    LOG_FILE, METRICS_FILE,
};
use dtrformer::Error;

fn small(seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        max_epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    for (k, v) in [
        ("d_f", "4"),
        ("d_a", "8"),
        ("d_n", "8"),
        ("layers", "1"),
        ("heads", "2"),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

fn synthetic(nodes: usize, days: usize, config: &TrainConfig) -> (Dataset, GraphPair) {
    let data = synth_generate(&SynthConfig {
        nodes,
        days,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let adj = build_adjacency(&data.edges, nodes, None, config.theta).unwrap();
    let dataset = Dataset::new(data.series, config.dataset_config()).unwrap();
    (dataset, GraphPair::from_adjacency(&adj).unwrap())
}

#[test]
fn same_seed_same_run() {
    let config = small(3);
    let (dataset, graphs) = synthetic(4, 2, &config);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut losses = Vec::new();
    for dir in &dirs {
        let mut t = Trainer::new(config.clone(), &dataset, graphs.clone()).unwrap();
        let report = t.fit(&dataset, Some(dir.path())).unwrap();
        losses.push(report.log.iter().map(|e| e.train_mae.to_bits()).collect::<Vec<_>>());
    }
    assert_eq!(losses[0], losses[1]);
    let ckpt = |i: usize| std::fs::read(dirs[i].path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt(0), ckpt(1));

    let mut other = Trainer::new(small(4), &dataset, graphs).unwrap();
    let first = other.run_epoch(&dataset).unwrap();
    assert_ne!(first.to_bits(), losses[0][0]);
}

#[test]
fn checkpoint_round_trip_reproduces_metrics() {
    let config = small(1);
    let (dataset, graphs) = synthetic(4, 2, &config);
    let dir = tempfile::tempdir().unwrap();
    let (trainer, summary) =
        train_and_evaluate(config.clone(), &dataset, graphs.clone(), Some(dir.path()), |_| {}).unwrap();

    let (loaded_config, params) = load_run(dir.path()).unwrap();
    assert_eq!(loaded_config, config);
    assert_eq!(params.to_bytes(), trainer.model.params.to_bytes());

    let (_, model) = restore_model(dir.path(), &dataset).unwrap();
    let mut again = Trainer::new(config, &dataset, graphs).unwrap();
    again.model = model;
    let val = again.evaluate(&dataset, Split::Val).unwrap();
    assert!((val.all.mae - summary.val.all.mae).abs() <= 1e-6);
    assert!((val.all.mae - summary.report.best_val_mae).abs() <= 1e-6);

    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "epoch,train_mae,val_mae,seconds");
    assert_eq!(rows.len(), 1 + summary.report.log.len());
    assert!(rows[1].starts_with("1,"));
    let metrics = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert!(metrics.starts_with("split,horizon,mae,rmse,mape,nse\n"));
    assert_eq!(metrics.lines().count(), 1 + 3 * 4);
}

#[test]
fn best_epoch_parameters_are_reported() {
    let mut config = small(2);
    config.max_epochs = 4;
    let (dataset, graphs) = synthetic(4, 2, &config);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(config, &dataset, graphs).unwrap();
    let report = t.fit(&dataset, Some(dir.path())).unwrap();
    let best = report
        .log
        .iter()
        .min_by(|a, b| a.val_mae.total_cmp(&b.val_mae))
        .unwrap();
    assert_eq!(report.best_epoch, best.epoch);
    let saved = ParamStore::<f32>::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(saved.to_bytes(), t.model.params.to_bytes());
    let val = t.evaluate(&dataset, Split::Val).unwrap().all.mae;
    assert!((val - best.val_mae).abs() < 1e-9);
    // best validation MAE never increases along the log
    let mut running = f64::INFINITY;
    for e in &report.log {
        running = running.min(e.val_mae);
    }
    assert_eq!(running, report.best_val_mae);
}

#[test]
fn divergence_keeps_the_last_good_checkpoint() {
    let config = small(6);
    let (dataset, graphs) = synthetic(4, 2, &config);
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(config, &dataset, graphs).unwrap();
    t.fit(&dataset, Some(dir.path())).unwrap();
    let ckpt = std::fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap();
    let good = t.model.params.to_bytes();

    t.adam.lr = 1e30;
    t.config.max_epochs = 6;
    match t.fit(&dataset, Some(dir.path())) {
        Err(Error::Diverged { epoch, .. }) => assert_eq!(epoch, 3),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert_eq!(std::fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap(), ckpt);
    assert_eq!(t.model.params.to_bytes(), good);
}

#[test]
fn every_variant_trains() {
    let mut names = vec!["full"];
    names.extend(dtrformer::model::Ablations::VARIANTS);
    for name in names {
        let mut config = small(7);
        config.max_epochs = 1;
        config.set("variant", name).unwrap();
        let (dataset, graphs) = synthetic(4, 2, &config);
        let (_, summary) = train_and_evaluate(config, &dataset, graphs, None, |_| {}).unwrap();
        assert!(summary.test.all.mae.is_finite(), "{name}");
    }
}

#[test]
fn empty_test_split_is_rejected_before_training() {
    let mut config = small(8);
    config.set("train_ratio", "0.8").unwrap();
    config.set("val_ratio", "0.2").unwrap();
    config.set("test_ratio", "0").unwrap();
    let (dataset, graphs) = synthetic(3, 2, &config);
    assert!(train_and_evaluate(config, &dataset, graphs, None, |_| {}).is_err());
}
