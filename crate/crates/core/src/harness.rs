//! End-to-end protocol: pretrain on a source task, transfer to the target
//! task, and compare fine-tuning modes under pooled two-fold
//! cross-validation.
//!
//! Seeds fan out from one global seed:
//!
//! - fold assignment: `seed`
//! - train/validation split of fold `f`: `seed + 101·(f + 1)`
//! - head initialization and training for mode `m`, fold `f`:
//!   `seed + 1000·(f + 1) + 100·(m + 1)`
//!
//! so every mode sees the same folds and splits while its training noise is
//! independent.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::weights::write_atomic;
use crate::data::{
    generate_synthetic_dataset, load_dataset, load_weights, save_weights, split_train_val, split_two_fold, Dataset,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{build_report, render_table, BinaryProjection, EvalReport};
use crate::model::{build_densenet_lite, DenseNetConfig, Network};
use crate::scheduler::{FineTuneMode, Phase, SftSchedule};
use crate::tensor::Tensor;
use crate::training::{fit, predict, ClassWeightPolicy, TrainConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Optimizer and batching settings shared by every fine-tuning mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub class_weight_policy: ClassWeightPolicy,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 16,
            class_weight_policy: ClassWeightPolicy::InverseFrequency,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Index { path: PathBuf, target_size: Option<(usize, usize)> },
    Synthetic { spec: SyntheticSpec, seed: u64 },
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Index { path, target_size } => load_dataset(path, *target_size),
            DataSource::Synthetic { spec, seed } => generate_synthetic_dataset(spec, *seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub source: SyntheticSpec,
    pub data_seed: u64,
    pub epochs: usize,
    pub settings: TrainSettings,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            source: SyntheticSpec::source_task(),
            data_seed: 1,
            epochs: 15,
            settings: TrainSettings::default(),
            seed: 7,
        }
    }
}

/// Where the starting weights for fine-tuning come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PretrainSource {
    Weights {
        path: PathBuf,
    },
    Inline {
        config: PretrainConfig,
    },
    /// Randomly initialized network (no transfer), seeded with `seed`.
    Random {
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Architecture; `num_classes` is taken from the dataset.
    pub model: DenseNetConfig,
    pub pretrained: PretrainSource,
    pub modes: Vec<FineTuneMode>,
    pub epochs: usize,
    pub step_epochs: usize,
    pub unfreeze_per_step: usize,
    pub train: TrainSettings,
    /// Per-mode replacements for `train`.
    #[serde(default)]
    pub mode_overrides: BTreeMap<FineTuneMode, TrainSettings>,
    pub train_fraction: f64,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(data: DataSource, out_dir: PathBuf) -> Self {
        ExperimentConfig {
            data,
            model: DenseNetConfig::default(),
            pretrained: PretrainSource::Inline { config: PretrainConfig::default() },
            modes: FineTuneMode::ALL.to_vec(),
            epochs: 30,
            step_epochs: 2,
            unfreeze_per_step: 1,
            train: TrainSettings::default(),
            mode_overrides: BTreeMap::new(),
            train_fraction: 0.7,
            out_dir,
            seed: 2024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::Config("at least one fine-tuning mode is required".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!("train fraction {} outside (0, 1)", self.train_fraction)));
        }
        self.model.validate()?;
        for mode in self.ordered_modes() {
            let schedule = SftSchedule {
                epochs: self.epochs,
                step_epochs: self.step_epochs,
                unfreeze_per_step: self.unfreeze_per_step,
                num_groups: 1,
                mode,
            };
            train_config(schedule, self.settings_for(mode), self.seed).validate()?;
        }
        Ok(())
    }

    pub fn settings_for(&self, mode: FineTuneMode) -> &TrainSettings {
        self.mode_overrides.get(&mode).unwrap_or(&self.train)
    }

    /// Modes in report order, duplicates removed.
    fn ordered_modes(&self) -> Vec<FineTuneMode> {
        FineTuneMode::ALL.into_iter().filter(|m| self.modes.contains(m)).collect()
    }
}

pub fn fold_split_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_add(101 * (fold as u64 + 1))
}

pub fn training_seed(seed: u64, fold: usize, mode: FineTuneMode) -> u64 {
    seed.wrapping_add(1000 * (fold as u64 + 1) + 100 * (mode.index() as u64 + 1))
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub network: Network,
    pub validation_accuracy: f64,
    pub best_epoch: usize,
}

/// Trains a network from scratch on the source task (all layers, 70/30
/// train/validation split) and keeps the best validation epoch. Saves the
/// weights when `out` is given.
pub fn cmd_pretrain(config: &PretrainConfig, model: &DenseNetConfig, out: Option<&Path>) -> Result<PretrainOutcome> {
    let data = generate_synthetic_dataset(&config.source, config.data_seed)?;
    let model = DenseNetConfig { num_classes: data.num_classes(), ..model.clone() };
    let mut net = build_densenet_lite(&model, config.seed)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (train_idx, val_idx) = split_train_val(&data, &all, 0.7, config.seed)?;
    let schedule = SftSchedule::new(config.epochs, 1, 1, net.num_groups(), FineTuneMode::FtAll)?;
    let train_config = train_config(schedule, &config.settings, config.seed);
    let run = fit(&mut net, &data.subset(&train_idx), &data.subset(&val_idx), &train_config)?;
    run.best.restore(&mut net);
    if let Some(path) = out {
        save_weights(&net, path)?;
    }
    Ok(PretrainOutcome { network: net, validation_accuracy: run.best.validation_accuracy, best_epoch: run.best.epoch })
}

fn train_config(schedule: SftSchedule, s: &TrainSettings, seed: u64) -> TrainConfig {
    TrainConfig {
        schedule,
        learning_rate: s.learning_rate,
        momentum: s.momentum,
        batch_size: s.batch_size,
        seed,
        class_weight_policy: s.class_weight_policy,
    }
}

/// Renders the unfreeze timeline of a schedule, one line per phase.
pub fn cmd_schedule_preview(n: usize, x: usize, s: usize, m: usize, mode: FineTuneMode) -> Result<String> {
    let schedule = SftSchedule::new(n, x, s, m, mode)?;
    Ok(schedule.schedule_summary().iter().map(|p| format!("{p}\n")).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct FoldInfo {
    pub fold: usize,
    pub test: usize,
    pub train: usize,
    pub validation: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub mode: FineTuneMode,
    pub fold: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
    pub class_weights: Vec<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub config: ExperimentConfig,
    pub dataset_size: usize,
    pub class_names: Vec<String>,
    pub class_counts: Vec<usize>,
    pub pretrained: String,
    pub pretrained_validation_accuracy: Option<f64>,
    pub num_groups: usize,
    pub weighted_layers: usize,
    pub folds: Vec<FoldInfo>,
    pub schedules: BTreeMap<String, Vec<Phase>>,
    pub runs: Vec<RunRecord>,
    pub failures: BTreeMap<String, String>,
    pub notes: Vec<String>,
    pub total_seconds: f64,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    /// One report per mode that completed, in report order.
    pub reports: Vec<EvalReport>,
    pub manifest: RunManifest,
}

impl ExperimentOutcome {
    pub fn report(&self, mode: FineTuneMode) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.mode == mode.label())
    }
}

struct FoldPlan {
    test: Vec<usize>,
    train: Vec<usize>,
    val: Vec<usize>,
}

struct FoldResult {
    record: RunRecord,
    probabilities: Vec<Vec<f64>>,
}

/// Runs every requested mode through pooled two-fold cross-validation and
/// writes reports, ROC curves, confusion matrices, per-epoch logs and the
/// manifest into `config.out_dir`. A failing mode is recorded in the
/// manifest and the others still run.
pub fn cmd_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    config.validate()?;
    let started = Instant::now();
    let dataset = config.data.load()?;
    if dataset.num_classes() != 3 {
        return Err(Error::Config(format!(
            "the protocol expects three classes (normal, TB, cancer), got {}",
            dataset.num_classes()
        )));
    }
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;

    let (base, pretrained_label, pretrained_acc) = match &config.pretrained {
        PretrainSource::Weights { path } => {
            (load_weights(path, None)?, format!("weights file {}", path.display()), None)
        }
        PretrainSource::Inline { config: pc } => {
            let path = config.out_dir.join("pretrained.sftw");
            let outcome = cmd_pretrain(pc, &config.model, Some(&path))?;
            (outcome.network, "inline source-task pretraining".to_string(), Some(outcome.validation_accuracy))
        }
        PretrainSource::Random { seed } => {
            let model = DenseNetConfig { num_classes: dataset.num_classes(), ..config.model.clone() };
            (build_densenet_lite(&model, *seed)?, format!("random initialization (seed {seed})"), None)
        }
    };
    let expected_input = (config.model.input_channels, config.model.input_size);
    let base_input = (base.config().input_channels, base.config().input_size);
    if expected_input != base_input {
        log::warn!("pretrained network expects input {base_input:?}, experiment config says {expected_input:?}");
    }

    let (part_a, part_b) = split_two_fold(&dataset, config.seed)?;
    let parts = [part_a, part_b];
    let mut plans = Vec::with_capacity(2);
    for fold in 0..2 {
        let (train, val) =
            split_train_val(&dataset, &parts[1 - fold], config.train_fraction, fold_split_seed(config.seed, fold))?;
        plans.push(FoldPlan { test: parts[fold].clone(), train, val });
    }

    let modes = config.ordered_modes();
    let k = dataset.num_classes();
    let m = base.num_groups();
    let tasks: Vec<(FineTuneMode, usize)> = modes.iter().flat_map(|&mode| (0..2).map(move |f| (mode, f))).collect();
    let results: Vec<Result<FoldResult>> =
        tasks.par_iter().map(|&(mode, fold)| run_fold(config, &dataset, &base, &plans[fold], mode, fold)).collect();

    let mut reports = Vec::new();
    let mut runs = Vec::new();
    let mut failures = BTreeMap::new();
    let mut schedules = BTreeMap::new();
    let mut by_mode: BTreeMap<FineTuneMode, Vec<FoldResult>> = BTreeMap::new();
    for ((mode, fold), result) in tasks.iter().zip(results) {
        match result {
            Ok(r) => by_mode.entry(*mode).or_default().push(r),
            Err(e) => {
                log::error!("{mode} fold {fold}: {e}");
                failures.insert(mode.label().to_string(), format!("fold {fold}: {e}"));
            }
        }
    }
    for mode in &modes {
        let schedule = SftSchedule::new(config.epochs, config.step_epochs, config.unfreeze_per_step, m, *mode)?;
        schedules.insert(mode.label().to_string(), schedule.schedule_summary());
        if failures.contains_key(mode.label()) {
            continue;
        }
        let folds = by_mode.remove(mode).unwrap_or_default();
        match pool_and_report(config, &dataset, &plans, *mode, &folds, k) {
            Ok(report) => {
                reports.push(report);
                runs.extend(folds.into_iter().map(|f| f.record));
            }
            Err(e) => {
                log::error!("{mode}: {e}");
                failures.insert(mode.label().to_string(), e.to_string());
            }
        }
    }

    let table = render_table(&reports);
    write_atomic(&config.out_dir.join("table.txt"), table.as_bytes())?;

    let manifest = RunManifest {
        tool_version: TOOL_VERSION,
        config: config.clone(),
        dataset_size: dataset.len(),
        class_names: dataset.class_names.clone(),
        class_counts: dataset.label_counts(),
        pretrained: pretrained_label,
        pretrained_validation_accuracy: pretrained_acc,
        num_groups: m,
        weighted_layers: base.count_weighted_layers(),
        folds: plans
            .iter()
            .enumerate()
            .map(|(fold, p)| FoldInfo { fold, test: p.test.len(), train: p.train.len(), validation: p.val.len() })
            .collect(),
        schedules,
        runs,
        failures,
        notes: protocol_notes(config),
        total_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&config.out_dir.join("manifest.json"), &manifest)?;
    Ok(ExperimentOutcome { reports, manifest })
}

fn run_fold(
    config: &ExperimentConfig,
    dataset: &Dataset,
    base: &Network,
    plan: &FoldPlan,
    mode: FineTuneMode,
    fold: usize,
) -> Result<FoldResult> {
    let started = Instant::now();
    let seed = training_seed(config.seed, fold, mode);
    let mut net = base.replace_head(dataset.num_classes(), seed)?;
    let schedule =
        SftSchedule::new(config.epochs, config.step_epochs, config.unfreeze_per_step, net.num_groups(), mode)?;
    let tc = train_config(schedule, config.settings_for(mode), seed);
    let run = fit(&mut net, &dataset.subset(&plan.train), &dataset.subset(&plan.val), &tc)?;
    run.best.restore(&mut net);
    let test = dataset.subset(&plan.test);
    let (probs, _) = predict(&net, &test.samples)?;
    let probabilities = (0..test.len()).map(|i| probs.row(i).to_vec()).collect();
    let epochs_path = config.out_dir.join(format!("epochs_{}_{fold}.csv", mode.slug()));
    write_atomic(&epochs_path, run.history_csv().as_bytes())?;
    Ok(FoldResult {
        record: RunRecord {
            mode,
            fold,
            seed,
            best_epoch: run.best.epoch,
            best_validation_accuracy: run.best.validation_accuracy,
            class_weights: run.class_weights,
            seconds: started.elapsed().as_secs_f64(),
        },
        probabilities,
    })
}

fn pool_and_report(
    config: &ExperimentConfig,
    dataset: &Dataset,
    plans: &[FoldPlan],
    mode: FineTuneMode,
    folds: &[FoldResult],
    k: usize,
) -> Result<EvalReport> {
    let mut pooled: Vec<Option<Vec<f64>>> = vec![None; dataset.len()];
    for result in folds {
        let plan = &plans[result.record.fold];
        for (&i, p) in plan.test.iter().zip(&result.probabilities) {
            pooled[i] = Some(p.clone());
        }
    }
    let rows: Vec<Vec<f64>> = pooled
        .into_iter()
        .enumerate()
        .map(|(i, p)| p.ok_or_else(|| Error::Contract(format!("sample {i} was never tested"))))
        .collect::<Result<_>>()?;
    let probabilities = Tensor::new(&[rows.len(), k], rows.concat())?;
    let predicted: Vec<usize> = rows.iter().map(|r| crate::training::argmax(r)).collect();
    let labels = dataset.labels();
    let report = build_report(mode.label(), &probabilities, &predicted, &labels, &dataset.class_names)?;

    let slug = mode.slug();
    write_json(&config.out_dir.join(format!("report_{slug}.json")), &report)?;
    write_atomic(&config.out_dir.join(format!("confusion_{slug}.csv")), report.confusion.to_csv().as_bytes())?;
    for projection in BinaryProjection::ALL {
        let curve = report.roc_curve(projection).expect("every projection is reported");
        let path = config.out_dir.join(format!("roc_{slug}_{}.csv", projection.slug()));
        write_atomic(&path, curve.to_csv().as_bytes())?;
    }
    let ids: Vec<&str> = dataset.samples.iter().map(|s| s.id.as_str()).collect();
    let csv = predictions_csv(&ids, &labels, &predicted, &rows);
    write_atomic(&config.out_dir.join(format!("predictions_{slug}.csv")), csv.as_bytes())?;
    Ok(report)
}

fn protocol_notes(config: &ExperimentConfig) -> Vec<String> {
    let mut notes = vec![
        "two-fold cross-validation with class-stratified, sample-level splits".to_string(),
        format!(
            "train/validation split {:.0}/{:.0} within the training part",
            config.train_fraction * 100.0,
            (1.0 - config.train_fraction) * 100.0
        ),
        "model selection: highest validation accuracy, earliest epoch on ties".to_string(),
        format!("class weights: {:?}, recomputed per fold from training labels", config.train.class_weight_policy),
        "SFT: head-only for the first step, then unfreeze_per_step groups every step_epochs epochs".to_string(),
        "frozen batch norms use running statistics and are not updated".to_string(),
    ];
    for p in BinaryProjection::ALL {
        notes.push(format!("{}: {}", p.slug(), p.score_rule()));
    }
    notes
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// CSV with header `id,true_label,predicted,p0,p1,...`.
pub fn predictions_csv(ids: &[&str], labels: &[usize], predicted: &[usize], probabilities: &[Vec<f64>]) -> String {
    let k = probabilities.first().map_or(0, Vec::len);
    let mut out = String::from("id,true_label,predicted");
    for c in 0..k {
        out.push_str(&format!(",p{c}"));
    }
    out.push('\n');
    for i in 0..ids.len() {
        out.push_str(&format!("{},{},{}", ids[i], labels[i], predicted[i]));
        for p in &probabilities[i] {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
    }
    out
}

/// Recomputes a report from a predictions CSV written by [`cmd_experiment`].
pub fn cmd_evaluate(predictions: &Path, mode: &str, class_names: &[String]) -> Result<EvalReport> {
    let mut reader = csv::Reader::from_path(predictions).map_err(|e| Error::format(predictions, e.to_string()))?;
    let (mut labels, mut predicted, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::format(predictions, e.to_string()))?;
        let field = |j: usize| -> Result<&str> {
            record.get(j).ok_or_else(|| Error::format(predictions, format!("row {}: missing column {j}", i + 2)))
        };
        let parse_err = |j: usize| Error::format(predictions, format!("row {}: bad value in column {j}", i + 2));
        labels.push(field(1)?.parse::<usize>().map_err(|_| parse_err(1))?);
        predicted.push(field(2)?.parse::<usize>().map_err(|_| parse_err(2))?);
        let probs = (3..record.len())
            .map(|j| field(j)?.parse::<f64>().map_err(|_| parse_err(j)))
            .collect::<Result<Vec<_>>>()?;
        if probs.len() != class_names.len() {
            return Err(Error::format(
                predictions,
                format!("row {}: {} probabilities for {} classes", i + 2, probs.len(), class_names.len()),
            ));
        }
        rows.push(probs);
    }
    if rows.is_empty() {
        return Err(Error::format(predictions, "no predictions"));
    }
    let probabilities = Tensor::new(&[rows.len(), class_names.len()], rows.concat())?;
    build_report(mode, &probabilities, &predicted, &labels, class_names)
}
