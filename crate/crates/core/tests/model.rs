mod common;

use common::{network_gradient_error, random_tensor, rng, tiny_config, FD_REL_TOL};
use seqft::model::{build_densenet_lite, DenseNetConfig};
use seqft::{Graph, Tensor};

fn probe_batch(n: usize, cfg: &DenseNetConfig, seed: u64) -> Tensor {
    let (h, w) = cfg.input_size;
    random_tensor(&mut rng(seed), &[n, cfg.input_channels, h, w])
}

#[test]
fn forward_shape() {
    let cfg = DenseNetConfig::default();
    let mut net = build_densenet_lite(&cfg, 1).unwrap();
    let mut g = Graph::new();
    let pass = net.forward(&mut g, &probe_batch(2, &cfg, 0), true).unwrap();
    assert_eq!(g.value(pass.logits).shape(), &[2, 3]);
    assert_eq!(net.eval_logits(&probe_batch(5, &cfg, 0)).unwrap().shape(), &[5, 3]);
}

#[test]
fn wrong_input_shape_is_rejected() {
    let cfg = DenseNetConfig::default();
    let net = build_densenet_lite(&cfg, 1).unwrap();
    assert!(net.eval_logits(&Tensor::zeros(&[1, 2, 16, 16])).is_err());
    assert!(net.eval_logits(&Tensor::zeros(&[1, 1, 8, 16])).is_err());
}

#[test]
fn builds_are_deterministic() {
    let cfg = DenseNetConfig::default();
    let a = build_densenet_lite(&cfg, 42).unwrap();
    let b = build_densenet_lite(&cfg, 42).unwrap();
    let c = build_densenet_lite(&cfg, 43).unwrap();
    assert_eq!(a.parameters(), b.parameters());
    assert_ne!(a.parameters(), c.parameters());
}

#[test]
fn dense_connectivity_channel_counts() {
    let cfg = DenseNetConfig::default();
    let net = build_densenet_lite(&cfg, 0).unwrap();
    let inputs = cfg.block_input_channels().unwrap();
    for (b, &c_in) in inputs.iter().enumerate() {
        for l in 0..cfg.layers_per_block[b] {
            let conv = net.parameters().iter().find(|p| p.name == format!("block{b}.layer{l}.conv")).unwrap();
            assert_eq!(conv.tensor.shape(), &[cfg.growth_rate, c_in + l * cfg.growth_rate, 3, 3]);
        }
    }
    assert_eq!(inputs, vec![8, 8]);
}

#[test]
fn adding_a_dense_layer_adds_one_weighted_layer() {
    let base = DenseNetConfig::default();
    let before = build_densenet_lite(&base, 0).unwrap().count_weighted_layers();
    for b in 0..base.num_blocks {
        let mut cfg = base.clone();
        cfg.layers_per_block[b] += 1;
        assert_eq!(build_densenet_lite(&cfg, 0).unwrap().count_weighted_layers(), before + 1);
    }
}

#[test]
fn groups_partition_parameters() {
    for cfg in [DenseNetConfig::default(), tiny_config()] {
        let net = build_densenet_lite(&cfg, 0).unwrap();
        let m = net.num_groups();
        assert_eq!(m, net.count_weighted_layers());
        let mut owner = vec![None; net.parameters().len()];
        for (i, group) in net.groups().iter().enumerate() {
            assert_eq!(group.index, i);
            assert_eq!(group.is_head, i == m - 1);
            for &p in &group.parameters {
                assert!(owner[p].is_none(), "parameter {p} in two groups");
                owner[p] = Some(i);
                assert_eq!(net.parameters()[p].group, i);
            }
        }
        assert!(owner.iter().all(Option::is_some));
        let head: Vec<&str> = net.head_group().parameters.iter().map(|&p| net.parameters()[p].name.as_str()).collect();
        assert_eq!(head, vec!["head.weight", "head.bias"]);
    }
}

#[test]
fn replace_head_keeps_the_body() {
    let cfg = DenseNetConfig { num_classes: 10, ..DenseNetConfig::default() };
    let source = build_densenet_lite(&cfg, 5).unwrap();
    let x = probe_batch(3, &cfg, 9);
    assert_eq!(source.eval_logits(&x).unwrap().shape(), &[3, 10]);
    let target = source.replace_head(3, 77).unwrap();
    assert_eq!(target.eval_logits(&x).unwrap().shape(), &[3, 3]);
    assert_eq!(target.count_weighted_layers(), source.count_weighted_layers());
    assert_eq!(target.batch_norm_stats(), source.batch_norm_stats());
    let head = source.num_groups() - 1;
    for (a, b) in source.parameters().iter().zip(target.parameters()) {
        assert_eq!(a.name, b.name);
        if a.group != head {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
    }
    let again = source.replace_head(3, 77).unwrap();
    assert_eq!(again.parameters(), target.parameters());
    assert!(source.replace_head(1, 0).is_err());
}

#[test]
fn zero_head_gives_zero_logits() {
    let cfg = DenseNetConfig::default();
    let mut net = build_densenet_lite(&cfg, 2).unwrap();
    let head = net.head_group().parameters.clone();
    for p in head {
        net.parameters_mut()[p].tensor.data_mut().fill(0.0);
    }
    let logits = net.eval_logits(&probe_batch(4, &cfg, 1)).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn eval_forward_is_pure_and_row_independent() {
    let cfg = DenseNetConfig::default();
    let net = build_densenet_lite(&cfg, 2).unwrap();
    let one = probe_batch(1, &cfg, 4);
    let same = Tensor::stack(&[&one.reshape(&[1, 16, 16]).unwrap(); 3]).unwrap();
    let first = net.eval_logits(&same).unwrap();
    let second = net.eval_logits(&same).unwrap();
    assert_eq!(first, second);
    assert_eq!(first.row(0), first.row(1));
    assert_eq!(first.row(0), first.row(2));

    let mut copy = net.clone();
    let mut g = Graph::new();
    let pass = copy.forward(&mut g, &same, false).unwrap();
    assert_eq!(g.value(pass.logits).data(), first.data());
    assert_eq!(copy.batch_norm_stats(), net.batch_norm_stats());
}

#[test]
fn training_forward_updates_running_statistics() {
    let cfg = DenseNetConfig::default();
    let mut net = build_densenet_lite(&cfg, 2).unwrap();
    let before = net.batch_norm_stats().to_vec();
    let mut g = Graph::new();
    net.forward(&mut g, &probe_batch(4, &cfg, 3), true).unwrap();
    assert_ne!(net.batch_norm_stats(), &before[..]);
}

#[test]
fn full_network_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let net = build_densenet_lite(&cfg, 11).unwrap();
    assert!(net.num_parameters() <= 500, "{} parameters", net.num_parameters());
    let batch = probe_batch(4, &cfg, 12);
    let err = network_gradient_error(&net, &batch, &[0, 1, 2, 1], &[1.5, 0.5, 1.0]);
    assert!(err < FD_REL_TOL, "max relative error {err:e}");
}

#[test]
fn snapshot_restore_round_trip() {
    let cfg = DenseNetConfig::default();
    let mut net = build_densenet_lite(&cfg, 2).unwrap();
    let snap = net.snapshot();
    let before = net.clone();
    net.parameters_mut()[0].tensor.data_mut()[0] += 1.0;
    let mut g = Graph::new();
    net.forward(&mut g, &probe_batch(2, &cfg, 3), true).unwrap();
    net.restore(&snap);
    assert_eq!(net.parameters(), before.parameters());
    assert_eq!(net.batch_norm_stats(), before.batch_norm_stats());
}
