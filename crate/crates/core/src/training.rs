//! Loss, optimizer and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{Network, Snapshot};
use crate::scheduler::{apply_freeze_state, SftSchedule};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassWeightPolicy {
    #[serde(rename = "UNIFORM")]
    Uniform,
    #[serde(rename = "INVERSE_FREQUENCY")]
    InverseFrequency,
}

/// Per-class loss weights. Inverse-frequency weights are `N / (K · count)`,
/// so they average to 1 over the classes.
pub fn class_weights(label_counts: &[usize], policy: ClassWeightPolicy) -> Result<Vec<f64>> {
    let k = label_counts.len();
    match policy {
        ClassWeightPolicy::Uniform => Ok(vec![1.0; k]),
        ClassWeightPolicy::InverseFrequency => {
            if let Some(empty) = label_counts.iter().position(|&c| c == 0) {
                return Err(Error::Config(format!("class {empty} has no training samples")));
            }
            let total: usize = label_counts.iter().sum();
            Ok(label_counts.iter().map(|&c| total as f64 / (k * c) as f64).collect())
        }
    }
}

/// Mean weighted cross-entropy of `logits` against `labels`.
pub fn weighted_cross_entropy(graph: &mut Graph, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
    graph.weighted_cross_entropy(logits, labels, weights)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: SftSchedule,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub class_weight_policy: ClassWeightPolicy,
}

impl TrainConfig {
    pub fn new(schedule: SftSchedule) -> Self {
        TrainConfig {
            schedule,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            class_weight_policy: ClassWeightPolicy::InverseFrequency,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// SGD with momentum: `v ← μ·v + g; p ← p − lr·v`.
///
/// Only parameters that currently require gradients move; frozen ones keep
/// both their value and their velocity.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd { learning_rate, momentum, velocity: Vec::new() }
    }

    /// Applies one update and clears the gradients it consumed.
    pub fn step(&mut self, network: &mut Network) -> Result<()> {
        sgd_step(network, self.learning_rate, self.momentum, &mut self.velocity)
    }
}

/// One momentum-SGD update over the trainable parameters of `network`.
/// `velocity` is indexed like [`Network::parameters`] and grows on demand.
pub fn sgd_step(
    network: &mut Network,
    learning_rate: f64,
    momentum: f64,
    velocity: &mut Vec<Option<Vec<f64>>>,
) -> Result<()> {
    let params = network.parameters_mut();
    if let Some(p) = params.iter().find(|p| p.tensor.requires_grad() && p.tensor.grad().is_none()) {
        return Err(Error::Contract(format!("parameter {} has no gradient; run backward first", p.name)));
    }
    velocity.resize(params.len(), None);
    for (p, v) in params.iter_mut().zip(velocity.iter_mut()) {
        if !p.tensor.requires_grad() {
            continue;
        }
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let v = v.get_or_insert_with(|| vec![0.0; grad.len()]);
        for ((vi, gi), pi) in v.iter_mut().zip(&grad).zip(p.tensor.data_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= learning_rate * *vi;
        }
        p.tensor.clear_grad();
    }
    Ok(())
}

/// Parameters of the best epoch seen so far.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub snapshot: Snapshot,
    pub validation_accuracy: f64,
}

impl Checkpoint {
    pub fn restore(&self, network: &mut Network) {
        network.restore(&self.snapshot);
    }
}

/// One line of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub trainable_groups: usize,
    pub train_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainingRun {
    pub best: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub class_weights: Vec<f64>,
}

impl TrainingRun {
    /// CSV with header `epoch,trainable_groups,train_loss,validation_accuracy`.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,trainable_groups,train_loss,validation_accuracy\n");
        for r in &self.history {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.trainable_groups, r.train_loss, r.validation_accuracy));
        }
        out
    }
}

/// Trains `network` for `config.schedule.epochs` epochs and returns the
/// epoch with the highest validation accuracy (earliest on ties).
///
/// Before each epoch the schedule's freeze state is applied. On return the
/// network holds the parameters of the *last* epoch; use
/// [`Checkpoint::restore`] to load the selected ones.
pub fn fit(network: &mut Network, train: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<TrainingRun> {
    fit_with_observer(network, train, val, config, |_, _| {})
}

/// [`fit`] that calls `observer` at the end of every epoch with that
/// epoch's record and the network state after its last update.
pub fn fit_with_observer(
    network: &mut Network,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord, &Network),
) -> Result<TrainingRun> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must both be non-empty".into()));
    }
    let k = network.config().num_classes;
    if train.num_classes() != k {
        return Err(Error::Config(format!("network has {k} outputs but the data has {} classes", train.num_classes())));
    }
    if config.schedule.num_groups != network.num_groups() {
        return Err(Error::Config(format!(
            "schedule is for {} groups but the network has {}",
            config.schedule.num_groups,
            network.num_groups()
        )));
    }
    let weights = class_weights(&train.label_counts(), config.class_weight_policy)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Sgd::new(config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::with_capacity(config.schedule.epochs);

    for epoch in 0..config.schedule.epochs {
        let state = config.schedule.freeze_state(epoch)?;
        apply_freeze_state(network, &state)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let samples: Vec<&Sample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let batch = Dataset::batch(&samples)?;
            let mut graph = Graph::new();
            let pass = network.forward(&mut graph, &batch, true)?;
            let loss = weighted_cross_entropy(&mut graph, pass.logits, &labels, &weights)?;
            loss_sum += graph.value(loss).data()[0] * chunk.len() as f64;
            graph.backward(loss)?;
            network.accumulate_grads(&graph, &pass);
            optimizer.step(network)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Contract(format!("training diverged at epoch {epoch} (loss {train_loss})")));
        }
        let (_, predicted) = predict(network, &val.samples)?;
        let correct = predicted.iter().zip(&val.samples).filter(|(p, s)| **p == s.label).count();
        let validation_accuracy = correct as f64 / val.len() as f64;
        let record = EpochRecord { epoch, trainable_groups: state.trainable.len(), train_loss, validation_accuracy };
        observer(&record, network);
        history.push(record);
        if best.as_ref().is_none_or(|b| validation_accuracy > b.validation_accuracy) {
            best = Some(Checkpoint { epoch, snapshot: network.snapshot(), validation_accuracy });
        }
        log::debug!(
            "epoch {epoch}: groups {} loss {train_loss:.4} val acc {validation_accuracy:.4}",
            state.trainable.len()
        );
    }
    Ok(TrainingRun { best: best.expect("at least one epoch"), history, class_weights: weights })
}

const PREDICT_CHUNK: usize = 64;

/// Eval-mode class probabilities `[N × K]` and argmax labels (lowest index
/// wins ties).
pub fn predict(network: &Network, samples: &[Sample]) -> Result<(Tensor, Vec<usize>)> {
    if samples.is_empty() {
        return Err(Error::Contract("predict needs at least one sample".into()));
    }
    let k = network.config().num_classes;
    let mut probs = Vec::with_capacity(samples.len() * k);
    for chunk in samples.chunks(PREDICT_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let logits = network.eval_logits(&Dataset::batch(&refs)?)?;
        probs.extend(crate::tensor::softmax(logits.data(), k));
    }
    let probabilities = Tensor::new(&[samples.len(), k], probs)?;
    let labels = (0..samples.len()).map(|i| argmax(probabilities.row(i))).collect();
    Ok((probabilities, labels))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
