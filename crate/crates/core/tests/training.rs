mod common;

use std::collections::BTreeSet;

use common::{halves_dataset, random_tensor, rng, weighted_ce_oracle};
use proptest::prelude::*;
use seqft::model::{build_densenet_lite, DenseNetConfig, Network, StemConfig};
use seqft::scheduler::{apply_freeze_state, FineTuneMode, FreezeState, SftSchedule};
use seqft::training::{
    argmax, class_weights, fit, fit_with_observer, predict, sgd_step, weighted_cross_entropy, ClassWeightPolicy,
    TrainConfig,
};
use seqft::{Graph, Tensor};

fn toy_config() -> DenseNetConfig {
    DenseNetConfig {
        input_size: (8, 8),
        initial_conv: StemConfig { kernel: 3, stride: 1, out_channels: 4 },
        layers_per_block: vec![1, 1],
        num_classes: 2,
        ..DenseNetConfig::default()
    }
}

fn ce(logits: &[f64], k: usize, labels: &[usize], weights: &[f64]) -> f64 {
    let mut g = Graph::new();
    let z = g.constant(Tensor::new(&[labels.len(), k], logits.to_vec()).unwrap());
    let loss = weighted_cross_entropy(&mut g, z, labels, weights).unwrap();
    g.value(loss).data()[0]
}

#[test]
fn class_weight_examples() {
    let w = class_weights(&[81, 76, 277], ClassWeightPolicy::InverseFrequency).unwrap();
    for (got, want) in w.iter().zip([434.0 / (3.0 * 81.0), 434.0 / (3.0 * 76.0), 434.0 / (3.0 * 277.0)]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert!((w[0] - 1.786).abs() < 1e-3 && (w[1] - 1.904).abs() < 1e-3 && (w[2] - 0.522).abs() < 1e-3);
    assert_eq!(class_weights(&[10, 10, 10], ClassWeightPolicy::InverseFrequency).unwrap(), vec![1.0; 3]);
    assert_eq!(class_weights(&[81, 76, 277], ClassWeightPolicy::Uniform).unwrap(), vec![1.0; 3]);
    let err = class_weights(&[5, 0, 5], ClassWeightPolicy::InverseFrequency).unwrap_err();
    assert!(err.to_string().contains("class 1"));
}

#[test]
fn cross_entropy_limits() {
    let uniform = ce(&[0.3; 6], 3, &[0, 2], &[1.0; 3]);
    assert!((uniform - 3f64.ln()).abs() < 1e-12);
    let peaked = ce(&[60.0, 0.0, 0.0, 0.0, 0.0, 60.0], 3, &[0, 2], &[1.0; 3]);
    assert!(peaked < 1e-20);
}

#[test]
fn weighted_cross_entropy_matches_direct_sum() {
    let logits = random_tensor(&mut rng(5), &[4, 3]).into_data();
    let labels = [0, 2, 1, 0];
    let weights = [2.0, 1.0, 1.0];
    let got = ce(&logits, 3, &labels, &weights);
    assert!((got - weighted_ce_oracle(&logits, 3, &labels, &weights)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn uniform_weights_equal_plain_cross_entropy(
        seed in 0u64..1000, n in 1usize..20, k in 2usize..6,
    ) {
        let mut r = rng(seed);
        let logits: Vec<f64> = (0..n * k).map(|_| rand::Rng::random_range(&mut r, -5.0..5.0)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut r, 0..k)).collect();
        let got = ce(&logits, k, &labels, &vec![1.0; k]);
        prop_assert!((got - weighted_ce_oracle(&logits, k, &labels, &vec![1.0; k])).abs() < 1e-12);
    }

    #[test]
    fn predicted_probabilities_are_distributions(seed in 0u64..50) {
        let cfg = DenseNetConfig::default();
        let net = build_densenet_lite(&cfg, seed).unwrap();
        let data = seqft::data::generate_synthetic_dataset(
            &"high-separability;counts=2,2,2".parse().unwrap(), seed).unwrap();
        let (probs, labels) = predict(&net, &data.samples).unwrap();
        for (i, &label) in labels.iter().enumerate() {
            let row = probs.row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert_eq!(label, argmax(row));
        }
    }
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(argmax(&[5.0, 1.0, 1.0]), 0);
    assert_eq!(argmax(&[2.0, 2.0, 0.0]), 0);
    assert_eq!(argmax(&[0.0, 3.0, 3.0]), 1);
}

/// Network with only the head trainable and every head gradient set to `g`.
fn head_only(g: f64) -> Network {
    let mut net = build_densenet_lite(&toy_config(), 1).unwrap();
    let m = net.num_groups();
    apply_freeze_state(&mut net, &FreezeState { epoch: 0, trainable: BTreeSet::from([m - 1]) }).unwrap();
    set_head_grads(&mut net, g);
    net
}

fn set_head_grads(net: &mut Network, g: f64) {
    let head = net.head_group().parameters.clone();
    for p in head {
        let t = &mut net.parameters_mut()[p].tensor;
        let n = t.len();
        t.accumulate_grad(&vec![g; n]);
    }
}

#[test]
fn plain_sgd_step() {
    let mut net = head_only(2.0);
    let p = net.head_group().parameters[0];
    net.parameters_mut()[p].tensor.data_mut()[0] = 1.0;
    sgd_step(&mut net, 0.1, 0.0, &mut Vec::new()).unwrap();
    assert!((net.parameters()[p].tensor.data()[0] - 0.8).abs() < 1e-15);
    assert!(net.parameters()[p].tensor.grad().is_none());
}

#[test]
fn momentum_recurrence() {
    let (lr, g) = (0.05, 0.7);
    let mut net = head_only(g);
    let p = net.head_group().parameters[0];
    let mut velocity = Vec::new();
    let p0 = net.parameters()[p].tensor.data()[3];
    sgd_step(&mut net, lr, 0.9, &mut velocity).unwrap();
    let p1 = net.parameters()[p].tensor.data()[3];
    set_head_grads(&mut net, g);
    sgd_step(&mut net, lr, 0.9, &mut velocity).unwrap();
    let p2 = net.parameters()[p].tensor.data()[3];
    assert!((p0 - p1 - lr * g).abs() < 1e-15);
    assert!((p1 - p2 - lr * (g + 0.9 * g)).abs() < 1e-15);
}

#[test]
fn frozen_parameters_never_move() {
    let mut net = head_only(1.0);
    let before = net.clone();
    let mut velocity = Vec::new();
    for _ in 0..5 {
        sgd_step(&mut net, 0.1, 0.9, &mut velocity).unwrap();
        set_head_grads(&mut net, 1.0);
    }
    let head = net.num_groups() - 1;
    for (a, b) in before.parameters().iter().zip(net.parameters()) {
        if a.group == head {
            assert_ne!(a.tensor.data(), b.tensor.data());
        } else {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
    }
}

#[test]
fn missing_gradient_is_a_contract_error() {
    let mut net = head_only(1.0);
    net.zero_grads();
    assert!(sgd_step(&mut net, 0.1, 0.9, &mut Vec::new()).is_err());
}

fn train_config(net: &Network, n: usize, mode: FineTuneMode, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(SftSchedule::new(n, 2, 1, net.num_groups(), mode).unwrap());
    cfg.seed = seed;
    cfg.batch_size = 8;
    cfg
}

#[test]
fn separable_toy_set_is_learned() {
    let train = halves_dataset(20, 8, 1);
    let val = halves_dataset(8, 8, 2);
    let mut net = build_densenet_lite(&toy_config(), 3).unwrap();
    let cfg = train_config(&net, 30, FineTuneMode::FtAll, 4);
    let run = fit(&mut net, &train, &val, &cfg).unwrap();
    assert_eq!(run.best.validation_accuracy, 1.0);
    assert_eq!(run.history.len(), 30);
    assert!(run.history.last().unwrap().train_loss < run.history[0].train_loss);
}

#[test]
fn single_epoch_selects_epoch_zero() {
    let train = halves_dataset(4, 8, 1);
    let mut net = build_densenet_lite(&toy_config(), 3).unwrap();
    let cfg = train_config(&net, 1, FineTuneMode::Sft, 4);
    let run = fit(&mut net, &train, &train, &cfg).unwrap();
    assert_eq!(run.best.epoch, 0);
}

#[test]
fn fit_is_deterministic() {
    let train = halves_dataset(10, 8, 1);
    let val = halves_dataset(4, 8, 2);
    let base = build_densenet_lite(&toy_config(), 3).unwrap();
    let cfg = train_config(&base, 5, FineTuneMode::Sft, 9);
    let (mut a, mut b) = (base.clone(), base.clone());
    let ra = fit(&mut a, &train, &val, &cfg).unwrap();
    let rb = fit(&mut b, &train, &val, &cfg).unwrap();
    assert_eq!(ra.best, rb.best);
    assert_eq!(ra.history_csv(), rb.history_csv());
    assert_eq!(a.parameters(), b.parameters());
}

#[test]
fn only_scheduled_groups_ever_change() {
    let train = halves_dataset(10, 8, 1);
    let val = halves_dataset(4, 8, 2);
    let mut net = build_densenet_lite(&toy_config(), 3).unwrap();
    let initial = net.clone();
    let cfg = train_config(&net, 4, FineTuneMode::Sft, 9);
    let scheduled: BTreeSet<usize> = (0..4).flat_map(|e| cfg.schedule.trainable_groups_at_epoch(e).unwrap()).collect();
    fit(&mut net, &train, &val, &cfg).unwrap();
    let changed: BTreeSet<usize> = initial
        .parameters()
        .iter()
        .zip(net.parameters())
        .filter(|(a, b)| a.tensor.data() != b.tensor.data())
        .map(|(a, _)| a.group)
        .collect();
    assert_eq!(changed, scheduled);
    assert!(scheduled.len() < net.num_groups());
}

#[test]
fn observer_sees_every_epoch() {
    let train = halves_dataset(6, 8, 1);
    let mut net = build_densenet_lite(&toy_config(), 3).unwrap();
    let cfg = train_config(&net, 6, FineTuneMode::Sft, 1);
    let mut seen = Vec::new();
    fit_with_observer(&mut net, &train, &train, &cfg, |record, _| seen.push((record.epoch, record.trainable_groups)))
        .unwrap();
    assert_eq!(seen, vec![(0, 1), (1, 1), (2, 2), (3, 2), (4, 3), (5, 3)]);
}

#[test]
fn fit_rejects_mismatched_inputs() {
    let train = halves_dataset(4, 8, 1);
    let mut net = build_densenet_lite(&toy_config(), 3).unwrap();
    let mut cfg = train_config(&net, 2, FineTuneMode::FtAll, 1);
    cfg.schedule.num_groups += 1;
    assert!(fit(&mut net, &train, &train, &cfg).is_err());
    let mut three = build_densenet_lite(&DenseNetConfig { num_classes: 3, ..toy_config() }, 3).unwrap();
    let cfg = train_config(&three, 2, FineTuneMode::FtAll, 1);
    assert!(fit(&mut three, &train, &train, &cfg).is_err());
    let mut cfg = train_config(&net, 2, FineTuneMode::FtAll, 1);
    cfg.learning_rate = 0.0;
    assert!(fit(&mut net, &train, &train, &cfg).is_err());
}
