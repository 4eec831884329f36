use seqft::data::{load_weights, SyntheticSpec};
use seqft::evaluation::BinaryProjection;
use seqft::harness::{
    cmd_experiment, cmd_pretrain, cmd_schedule_preview, training_seed, DataSource, ExperimentConfig, PretrainConfig,
    PretrainSource, TrainSettings,
};
use seqft::model::DenseNetConfig;
use seqft::scheduler::FineTuneMode;

fn small_pretrain() -> PretrainConfig {
    PretrainConfig {
        source: "source-task;counts=40,40,40,40;noise=0;orientation_jitter=0".parse().unwrap(),
        epochs: 10,
        ..PretrainConfig::default()
    }
}

fn small_experiment(out: &std::path::Path) -> ExperimentConfig {
    let data = DataSource::Synthetic { spec: "high-separability;counts=10,10,20".parse().unwrap(), seed: 3 };
    let mut cfg = ExperimentConfig::new(data, out.to_path_buf());
    cfg.pretrained = PretrainSource::Inline { config: PretrainConfig { epochs: 2, ..small_pretrain() } };
    cfg.epochs = 3;
    cfg.step_epochs = 1;
    cfg
}

#[test]
fn pretraining_learns_the_source_task() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.sftw");
    let outcome = cmd_pretrain(&small_pretrain(), &DenseNetConfig::default(), Some(&path)).unwrap();
    assert!(outcome.validation_accuracy >= 0.9, "{}", outcome.validation_accuracy);
    let loaded = load_weights(&path, None).unwrap();
    assert_eq!(loaded.parameters(), outcome.network.parameters());
    assert_eq!(loaded.config().num_classes, 4);

    let again = dir.path().join("w2.sftw");
    cmd_pretrain(&small_pretrain(), &DenseNetConfig::default(), Some(&again)).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn experiment_pools_every_sample_once() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_experiment(dir.path());
    let outcome = cmd_experiment(&cfg).unwrap();
    let modes: Vec<&str> = outcome.reports.iter().map(|r| r.mode.as_str()).collect();
    assert_eq!(modes, vec!["FT_ALL", "FT_FC", "SFT"]);
    for r in &outcome.reports {
        assert_eq!(r.samples, 40);
        assert_eq!(r.confusion.total(), 40);
        assert!(r.auc(BinaryProjection::TbVsCancer).is_some());
    }
    let m = &outcome.manifest;
    assert!(m.failures.is_empty());
    assert_eq!(m.folds.iter().map(|f| f.test).sum::<usize>(), 40);
    for f in &m.folds {
        assert_eq!(f.train + f.validation + f.test, 40);
    }
    assert_eq!(m.runs.len(), 6);
    assert_eq!(m.schedules["SFT"].len(), 3);
    assert_eq!(m.schedules["FT_FC"].len(), 1);
    assert!(dir.path().join("pretrained.sftw").is_file());
    assert!(dir.path().join("table.txt").is_file());
}

#[test]
fn modes_use_distinct_training_seeds() {
    let mut seeds: Vec<u64> =
        FineTuneMode::ALL.iter().flat_map(|&m| (0..2).map(move |f| training_seed(2024, f, m))).collect();
    seeds.sort();
    seeds.dedup();
    assert_eq!(seeds.len(), 6);
}

#[test]
fn a_failing_mode_does_not_stop_the_others() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_experiment(dir.path());
    cfg.mode_overrides.insert(FineTuneMode::FtAll, TrainSettings { learning_rate: 1e300, ..TrainSettings::default() });
    let outcome = cmd_experiment(&cfg).unwrap();
    assert!(outcome.manifest.failures.contains_key("FT_ALL"));
    let modes: Vec<&str> = outcome.reports.iter().map(|r| r.mode.as_str()).collect();
    assert_eq!(modes, vec!["FT_FC", "SFT"]);
    assert!(!dir.path().join("report_ft_all.json").exists());
}

#[test]
fn configuration_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_experiment(dir.path());
    cfg.modes.clear();
    assert!(cmd_experiment(&cfg).unwrap_err().is_configuration());
    let mut cfg = small_experiment(dir.path());
    cfg.train_fraction = 1.0;
    assert!(cmd_experiment(&cfg).unwrap_err().is_configuration());
    let mut cfg = small_experiment(dir.path());
    cfg.data = DataSource::Synthetic { spec: SyntheticSpec::source_task(), seed: 1 };
    assert!(cmd_experiment(&cfg).unwrap_err().is_configuration());
    let mut cfg = small_experiment(dir.path());
    cfg.pretrained = PretrainSource::Weights { path: dir.path().join("absent.sftw") };
    assert!(cmd_experiment(&cfg).unwrap_err().is_configuration());
}

#[test]
fn schedule_preview_lines() {
    assert_eq!(cmd_schedule_preview(150, 5, 1, 7, FineTuneMode::Sft).unwrap().lines().count(), 7);
    assert_eq!(cmd_schedule_preview(150, 5, 1, 7, FineTuneMode::FtFc).unwrap().lines().count(), 1);
    assert_eq!(cmd_schedule_preview(9, 5, 1, 1, FineTuneMode::Sft).unwrap().lines().count(), 1);
    assert!(cmd_schedule_preview(9, 0, 1, 1, FineTuneMode::Sft).is_err());
}

#[test]
fn config_survives_a_json_round_trip() {
    let cfg = small_experiment(std::path::Path::new("out"));
    let text = serde_json::to_string(&cfg).unwrap();
    let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
}
