use waveforge_core::config::ExperimentConfig;
use waveforge_core::dataset::Dataset;
use waveforge_core::error::{Error, ErrorKind};
use waveforge_core::exec::ExecMode;
use waveforge_core::pipeline::{self, RunOptions};
use waveforge_core::report;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.grid.nx_ml = 16;
    cfg.grid.refinement = 4;
    cfg.model.hidden = vec![4];
    cfg.optimizer.epochs = 6;
    cfg.optimizer.checkpoints = vec![3];
    cfg.sweep.lambdas = vec![0.0, 8.5e-5];
    cfg.sweep.seeds = vec![1, 2];
    cfg.validate().unwrap();
    cfg
}

#[test]
fn field_round_trips_through_disk() {
    let cfg = tiny();
    let fine = pipeline::generate(&cfg).unwrap();
    let ml = pipeline::ml_field(&cfg, &fine).unwrap();
    let dir = tempfile::tempdir().unwrap();
    pipeline::save_field(dir.path(), &ml).unwrap();
    let back = pipeline::load_field(dir.path()).unwrap();
    assert_eq!(back.values, ml.values);
    assert_eq!(back.grid, ml.grid);
}

#[test]
fn generated_training_span_peaks_at_p0() {
    let cfg = tiny();
    let ml = pipeline::ml_field(&cfg, &pipeline::generate(&cfg).unwrap()).unwrap();
    let w = cfg.data.window;
    let end = (cfg.data.train_windows - 1) * w.stride + 2 * w.tx;
    let peak = ml.values[..end * ml.nx()].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!((peak - cfg.data.p0).abs() < 1e-12 * cfg.data.p0.max(1.0));
}

#[test]
fn wave_speed_round_trips_through_disk() {
    let cfg = tiny();
    let ml = pipeline::ml_field(&cfg, &pipeline::generate(&cfg).unwrap()).unwrap();
    let th = cfg.regularizer.thresholds;
    let ws = pipeline::compute_wave_speed(&ml, &th).unwrap();
    let dir = tempfile::tempdir().unwrap();
    pipeline::save_wave_speed(dir.path(), &ws, &th).unwrap();
    let back = pipeline::load_wave_speed(dir.path()).unwrap();
    assert_eq!(back.mask, ws.mask);
    for (a, b) in back.speeds.iter().zip(&ws.speeds) {
        assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
    }
}

#[test]
fn dataset_round_trips_and_keeps_test_cases_out_of_training() {
    let cfg = tiny();
    let ml = pipeline::ml_field(&cfg, &pipeline::generate(&cfg).unwrap()).unwrap();
    let ds = pipeline::build_dataset(&cfg, &ml).unwrap();
    assert_eq!(ds.manifest.train.len(), cfg.data.train_windows);
    assert_eq!(ds.manifest.test.len(), 2);
    for t in &ds.manifest.test {
        assert!(!ds.manifest.train.contains(&t.index));
    }
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
}

#[test]
fn train_run_writes_artifacts_and_refuses_to_overwrite() {
    let cfg = tiny();
    let ml = pipeline::ml_field(&cfg, &pipeline::generate(&cfg).unwrap()).unwrap();
    let ds = pipeline::build_dataset(&cfg, &ml).unwrap();
    let root = tempfile::tempdir().unwrap();
    let dir = pipeline::run_dir(root.path(), 8.5e-5, 1);

    let dry = RunOptions { force: false, dry_run: true };
    assert!(pipeline::train_run(&cfg, &ds, &dir, dry, ExecMode::Sequential).unwrap().is_none());
    assert!(!dir.exists());

    let rec = pipeline::train_run(&cfg, &ds, &dir, RunOptions::default(), ExecMode::Sequential)
        .unwrap()
        .unwrap();
    assert_eq!(rec.checkpoints, vec![3, 6]);
    for f in ["config.toml", "metrics.csv", "run.json", "epoch_3.wfck", "epoch_6.wfck"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + cfg.optimizer.epochs);

    let err = pipeline::train_run(&cfg, &ds, &dir, RunOptions::default(), ExecMode::Sequential)
        .unwrap_err();
    assert!(matches!(err, Error::RunExists(_)));
    let forced = RunOptions { force: true, dry_run: false };
    let again = pipeline::train_run(&cfg, &ds, &dir, forced, ExecMode::Sequential)
        .unwrap()
        .unwrap();
    assert_eq!(again, rec);
}

#[test]
fn mismatched_dataset_is_a_config_error() {
    let cfg = tiny();
    let ml = pipeline::ml_field(&cfg, &pipeline::generate(&cfg).unwrap()).unwrap();
    let ds = pipeline::build_dataset(&cfg, &ml).unwrap();
    let mut other = cfg.clone();
    other.grid.nx_ml = 32;
    let root = tempfile::tempdir().unwrap();
    let err = pipeline::train_run(&other, &ds, root.path(), RunOptions::default(), ExecMode::Sequential)
        .unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
}

#[test]
fn sweep_then_evaluate_is_reproducible() {
    let cfg = tiny();
    let ml = pipeline::ml_field(&cfg, &pipeline::generate(&cfg).unwrap()).unwrap();
    let ds = pipeline::build_dataset(&cfg, &ml).unwrap();
    let root = tempfile::tempdir().unwrap();
    let recs = pipeline::sweep(&cfg, &ds, root.path(), RunOptions::default()).unwrap();
    assert_eq!(recs.len(), 4);

    let dirs = report::find_runs(root.path()).unwrap();
    assert_eq!(dirs.len(), 4);
    let evals: Vec<_> = dirs
        .iter()
        .map(|d| report::evaluate_run(d, &ds, 1e-2).unwrap())
        .collect();
    for e in &evals {
        assert_eq!(e.final_epoch, 6);
        assert_eq!(e.early_epoch, Some(3));
        assert_eq!(e.cases.len(), 2);
        assert!(e.weight_increment.unwrap().is_finite());
    }

    let out_a = root.path().join("eval_a");
    let out_b = root.path().join("eval_b");
    let summary = report::write_eval(&out_a, &evals).unwrap();
    report::write_eval(&out_b, &evals).unwrap();
    for f in ["metrics.csv", "diagnostics.csv", "summary.json", "tables.json"] {
        let a = std::fs::read(out_a.join(f)).unwrap();
        let b = std::fs::read(out_b.join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }

    assert_eq!(summary.lambdas.len(), 2);
    assert_eq!(summary.lambdas[0].lambda, 0.0);
    assert!(summary.lambdas[0].case_b.is_none());
    assert!(summary.lambdas[1].case_b.is_some());
    for l in &summary.lambdas {
        assert_eq!(l.seeds, vec![1, 2]);
        assert!(l.best_seed.is_some());
        assert_eq!(l.cases[0].final_.l1[0].n, 2);
    }
    let text = report::render_tables(&summary);
    assert!(text.contains("case1 L1"));
    assert!(text.contains("case2 Linf"));
}

#[test]
fn evaluation_rejects_checkpoints_from_another_configuration() {
    let cfg = tiny();
    let ml = pipeline::ml_field(&cfg, &pipeline::generate(&cfg).unwrap()).unwrap();
    let ds = pipeline::build_dataset(&cfg, &ml).unwrap();
    let root = tempfile::tempdir().unwrap();
    let a = root.path().join("a");
    let b = root.path().join("b");
    pipeline::train_run(&cfg, &ds, &a, RunOptions::default(), ExecMode::Sequential).unwrap();
    pipeline::train_run(&cfg.for_run(0.0, 7), &ds, &b, RunOptions::default(), ExecMode::Sequential)
        .unwrap();
    std::fs::copy(b.join("epoch_6.wfck"), a.join("epoch_6.wfck")).unwrap();
    assert!(report::evaluate_run(&a, &ds, 1e-2).is_err());
}
