#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqft::Tensor;

pub const FD_EPS: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `|a − b| / max(|a|, |b|)`, or the absolute difference when both are tiny.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Central difference of `f` with respect to each entry of `x`.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_EPS;
            let up = f(&probe);
            probe[i] = orig - FD_EPS;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

/// Triple-loop matrix product.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (r, k, c) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            out[i * c + j] = s;
        }
    }
    out
}

/// Direct-definition cross-correlation with explicit zero padding.
pub fn naive_conv(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, c, h, w] = input.shape().try_into().unwrap();
    let [f, _, kh, kw] = kernel.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for o in 0..f {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = 0.0;
                    for ch in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (x * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += input.at(&[b, ch, iy as usize, ix as usize]) * kernel.at(&[o, ch, i, j]);
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    (vec![n, f, oh, ow], out)
}

/// Trainable set at `epoch` obtained by replaying the schedule one epoch at
/// a time: start with the head, and every `x` epochs release the next `s`
/// groups below the current ones.
pub fn simulate_sft(x: usize, s: usize, m: usize, epoch: usize) -> std::collections::BTreeSet<usize> {
    let mut trainable = std::collections::BTreeSet::from([m - 1]);
    for e in 1..=epoch {
        if e % x == 0 {
            for _ in 0..s {
                let lowest = *trainable.iter().next().unwrap();
                if lowest > 0 {
                    trainable.insert(lowest - 1);
                }
            }
        }
    }
    trainable
}

/// Pairwise Mann–Whitney AUC: fraction of (positive, negative) pairs where
/// the positive scores higher, ties counting one half.
pub fn mann_whitney(scores: &[f64], labels: &[bool]) -> f64 {
    let mut credit = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                credit += 1.0;
            } else if si == sj {
                credit += 0.5;
            }
        }
    }
    credit / pairs
}

/// Per-sample loop: `(1/N) Σ w_y · (log Σ_k exp z_k − z_y)`.
pub fn weighted_ce_oracle(logits: &[f64], k: usize, labels: &[usize], weights: &[f64]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += weights[y] * (lse - row[y]);
    }
    total / labels.len() as f64
}

/// A network small enough for a full finite-difference sweep but still
/// containing every layer type: stem, two dense blocks, a transition with
/// pooling, final batch norm and the head.
pub fn tiny_config() -> seqft::model::DenseNetConfig {
    seqft::model::DenseNetConfig {
        input_channels: 1,
        input_size: (6, 6),
        initial_conv: seqft::model::StemConfig { kernel: 3, stride: 1, out_channels: 2 },
        num_blocks: 2,
        layers_per_block: vec![1, 1],
        growth_rate: 2,
        transition_compression: 0.5,
        num_classes: 3,
    }
}

/// Training-mode weighted cross-entropy of `net` on `batch`.
pub fn network_loss(net: &mut seqft::model::Network, batch: &Tensor, labels: &[usize], weights: &[f64]) -> f64 {
    let mut g = seqft::Graph::new();
    let pass = net.forward(&mut g, batch, true).unwrap();
    let loss = seqft::training::weighted_cross_entropy(&mut g, pass.logits, labels, weights).unwrap();
    g.value(loss).data()[0]
}

/// Largest relative error between backpropagated parameter gradients and
/// central differences of the training loss, over every parameter entry.
pub fn network_gradient_error(net: &seqft::model::Network, batch: &Tensor, labels: &[usize], weights: &[f64]) -> f64 {
    let mut net = net.clone();
    let all = (0..net.num_groups()).collect();
    seqft::scheduler::apply_freeze_state(&mut net, &seqft::scheduler::FreezeState { epoch: 0, trainable: all })
        .unwrap();
    let mut g = seqft::Graph::new();
    let pass = net.forward(&mut g, batch, true).unwrap();
    let loss = seqft::training::weighted_cross_entropy(&mut g, pass.logits, labels, weights).unwrap();
    g.backward(loss).unwrap();
    net.accumulate_grads(&g, &pass);

    let mut worst = 0.0f64;
    for p in 0..net.parameters().len() {
        let analytic = net.parameters()[p].tensor.grad().unwrap().to_vec();
        let base = net.parameters()[p].tensor.data().to_vec();
        let mut probe_net = net.clone();
        let numeric = central_diff(&base, |probe| {
            probe_net.parameters_mut()[p].tensor.data_mut().copy_from_slice(probe);
            network_loss(&mut probe_net, batch, labels, weights)
        });
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    worst
}

/// Two well-separated classes of `size`×`size` images: bright left half
/// versus bright right half, with small noise.
pub fn halves_dataset(per_class: usize, size: usize, seed: u64) -> seqft::data::Dataset {
    let mut r = rng(seed);
    let mut samples = Vec::new();
    for i in 0..2 * per_class {
        let label = i % 2;
        let data = (0..size * size)
            .map(|p| {
                let left = p % size < size / 2;
                let on = if label == 0 { left } else { !left };
                (if on { 0.9 } else { 0.1 }) + r.random_range(-0.05..0.05)
            })
            .collect();
        samples.push(seqft::data::Sample {
            image: Tensor::new(&[1, size, size], data).unwrap(),
            label,
            id: format!("toy{i}"),
        });
    }
    seqft::data::Dataset::new(vec!["left".into(), "right".into()], samples).unwrap()
}
