//! Seeded, class-stratified splits. All functions return sorted indices
//! into the dataset.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};

fn by_class(dataset: &Dataset, members: &[usize]) -> Vec<Vec<usize>> {
    let mut classes = vec![Vec::new(); dataset.num_classes()];
    for &i in members {
        classes[dataset.samples[i].label].push(i);
    }
    classes
}

/// Splits the dataset into two halves whose sizes differ by at most one,
/// each holding (as nearly as integer counts allow) half of every class.
pub fn split_two_fold(dataset: &Dataset, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut classes = by_class(dataset, &all);
    if let Some((c, members)) = classes.iter().enumerate().find(|(_, m)| m.len() < 2) {
        return Err(Error::Config(format!(
            "class {:?} has {} sample(s); at least 2 are needed to appear in both folds",
            dataset.class_names[c],
            members.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    // odd-sized classes alternate which half receives the extra sample
    let mut extra_to_a = true;
    for members in &mut classes {
        members.shuffle(&mut rng);
        let mut half = members.len() / 2;
        if members.len() % 2 == 1 {
            if extra_to_a {
                half += 1;
            }
            extra_to_a = !extra_to_a;
        }
        a.extend_from_slice(&members[..half]);
        b.extend_from_slice(&members[half..]);
    }
    a.sort_unstable();
    b.sort_unstable();
    Ok((a, b))
}

/// Splits `part` into training and validation subsets with
/// `round(train_fraction · |part|)` training samples, allocated to classes
/// by largest remainder.
pub fn split_train_val(
    dataset: &Dataset,
    part: &[usize],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n = part.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "{n} samples cannot be split {:.0}/{:.0} with both sides non-empty",
            train_fraction * 100.0,
            (1.0 - train_fraction) * 100.0
        )));
    }
    let mut classes = by_class(dataset, part);
    let exact: Vec<f64> = classes.iter().map(|m| train_fraction * m.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut remaining = n_train - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..classes.len()).collect();
    // largest fractional part first, lower class index on ties
    order.sort_by(|&x, &y| (exact[y] - quota[y] as f64).total_cmp(&(exact[x] - quota[x] as f64)).then(x.cmp(&y)));
    for &c in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        if quota[c] < classes[c].len() {
            quota[c] += 1;
            remaining -= 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (members, &q) in classes.iter_mut().zip(&quota) {
        members.shuffle(&mut rng);
        train.extend_from_slice(&members[..q]);
        val.extend_from_slice(&members[q..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}
