use std::fs;

use fwdguess::estimators::Method;
use fwdguess::harness::{checkpoint_path, overlap_curves, train, DataSource, RunConfig, FINAL_CHECKPOINT, METRICS_FILE};
use fwdguess::metrics::{OverlapBasis, METRICS_HEADER};
use fwdguess::model::MlpModel;
use fwdguess::Error;

fn small(method: Method, dir: &std::path::Path) -> RunConfig {
    let mut c = RunConfig::new(
        method,
        DataSource::Synthetic {
            num_train: 300,
            num_test: 100,
            seed: 3,
        },
        dir,
    );
    c.layer_widths = vec![40, 16, 16, 10];
    c.epochs = 4;
    c.batch_size = 64;
    c.metrics_every = 5;
    c.checkpoint_every_epochs = 2;
    c.record_wall_time = false;
    c
}

#[test]
fn linear_classifier_separates_synthetic_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = RunConfig::new(Method::Backprop, DataSource::synthetic_default(0), dir.path());
    c.layer_widths = vec![40, 10];
    c.epochs = 50;
    // the default 1e-4 is tuned for the deep nets; a lone linear layer needs
    // a larger step to get there in 50 epochs
    c.optimizer.lr = 1e-3;
    let out = train(&c).unwrap();
    assert!(out.final_record.train_acc > 0.9, "{}", out.final_record.train_acc);
}

#[test]
fn metrics_csv_layout_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(Method::WPerp { k: 2 }, dir.path());
    let out = train(&c).unwrap();
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // 5 batches per epoch, 20 steps: logged at 0, 5, 10, 15 plus the closing record
    let steps: Vec<&str> = rows.iter().step_by(3).map(|r| r[0]).collect();
    assert_eq!(steps, ["0", "5", "10", "15", "20"]);
    assert!(rows.iter().all(|r| r.len() == 10));
    assert_eq!(rows.iter().take(3).map(|r| r[1]).collect::<Vec<_>>(), ["1", "2", "3"]);
    assert_eq!(out.records.len(), 5);

    for epoch in [2, 4] {
        assert!(checkpoint_path(dir.path(), epoch).is_file());
    }
    assert!(!checkpoint_path(dir.path(), 3).exists());
    let (model, header) = MlpModel::load_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(model, out.model);
    assert_eq!(header.step, 20);
}

#[test]
fn weight_perturbation_logs_undefined_metrics_as_nan() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(Method::WeightPerturbation, dir.path());
    c.epochs = 1;
    train(&c).unwrap();
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[2..5], ["NaN", "NaN", "NaN"]);
}

#[test]
fn identical_configs_reproduce_across_thread_counts() {
    let mut outputs = Vec::new();
    for threads in [1, 3] {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(Method::WTranspose, dir.path());
        c.threads = Some(threads);
        c.overlap_samples = 8;
        train(&c).unwrap();
        outputs.push((
            fs::read(dir.path().join(METRICS_FILE)).unwrap(),
            fs::read(dir.path().join("overlap.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn different_seeds_change_the_trajectory() {
    let mut csvs = Vec::new();
    for seed in [0, 1] {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(Method::ActivationPerturbation, dir.path());
        c.seed = seed;
        train(&c).unwrap();
        csvs.push(fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap());
    }
    assert_ne!(csvs[0], csvs[1]);
}

#[test]
fn frozen_biases_stay_at_initial_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(Method::WPerp { k: 3 }, dir.path());
    c.freeze_biases = true;
    let out = train(&c).unwrap();
    let init = MlpModel::new(&c.layer_widths, c.seed).unwrap();
    assert_eq!(out.model.biases(), init.biases());
    assert_ne!(out.model.weights(), init.weights());
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(Method::Backprop, dir.path());
    c.layer_widths = vec![40, 16, 9];
    assert!(matches!(train(&c), Err(Error::Config(_))));
    c.layer_widths = vec![32, 16, 10];
    let err = train(&c).unwrap_err();
    assert!(err.to_string().contains("40 features"), "{err}");
}

#[test]
fn io_failures_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let c = small(Method::Backprop, &blocker.join("out"));
    match train(&c) {
        Err(Error::Io { path, .. }) => assert!(path.starts_with(&blocker)),
        other => panic!("expected an I/O error, got {other:?}"),
    }

    let mut c = small(Method::Backprop, dir.path());
    c.data = DataSource::Files {
        train: dir.path().join("missing.csv"),
        test: dir.path().join("missing.csv"),
    };
    let err = train(&c).unwrap_err();
    assert!(err.to_string().contains("missing.csv"), "{err}");
}

#[test]
fn non_finite_loss_aborts_with_step() {
    // features near f64::MAX overflow the first layer, so the loss is NaN
    let dir = tempfile::tempdir().unwrap();
    let row = |label: usize, v: f64| {
        let feats: Vec<String> = (0..40).map(|_| v.to_string()).collect();
        format!("{label},{}\n", feats.join(","))
    };
    let text: String = (0..20).map(|i| row(i % 10, if i == 7 { 1e308 } else { 0.5 })).collect();
    let path = dir.path().join("train.csv");
    fs::write(&path, text).unwrap();
    let mut c = small(Method::Backprop, dir.path());
    c.data = DataSource::Files {
        train: path.clone(),
        test: path,
    };
    match train(&c) {
        Err(Error::NanLoss { step }) => assert_eq!(step, 0),
        other => panic!("expected NanLoss, got {:?}", other.map(|o| o.final_record)),
    }
}

#[test]
fn overlap_curves_rise_to_one() {
    let model = MlpModel::new(&[40, 16, 16, 10], 2).unwrap();
    let (train_set, _) = DataSource::synthetic_default(0).load().unwrap();
    let (x, y) = train_set.gather(&(0..32).collect::<Vec<_>>());
    let curves = overlap_curves(&model, &x, &y, None, OverlapBasis::V).unwrap();
    assert_eq!(curves.iter().map(|c| c.0).collect::<Vec<_>>(), [1, 2]);
    assert_eq!(curves[1].1.len(), 10);
    for (_, c) in &curves {
        assert!(c.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        assert!((c.last().unwrap() - 1.0).abs() < 1e-9);
    }
    let only = overlap_curves(&model, &x, &y, Some(&[2]), OverlapBasis::V).unwrap();
    assert_eq!(only, curves[1..]);
    assert!(overlap_curves(&model, &x, &y, Some(&[3]), OverlapBasis::V).is_err());
}
