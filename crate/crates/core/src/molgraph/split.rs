use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, TargetStats};
use crate::error::{Error, Result};

/// Tolerates ratios like 0.7 whose product with `n` lands just below an integer.
const FLOOR_SLACK: f64 = 1e-9;

/// Shuffles with `seed` and partitions into train/val/test. Train gets
/// ⌊r_train·n⌋ molecules, val ⌊r_val·n⌋, test the remainder. Target
/// statistics of the train part are attached to all three.
pub fn split_random(dataset: Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (r_train, r_val, r_test) = ratios;
    if [r_train, r_val, r_test].iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::invalid(format!("split ratios must be positive, got {ratios:?}")));
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios must sum to 1, got {ratios:?}")));
    }
    let n = dataset.len();
    let n_train = (r_train * n as f64 + FLOOR_SLACK).floor() as usize;
    let n_val = (r_val * n as f64 + FLOOR_SLACK).floor() as usize;
    if n_train + n_val > n {
        return Err(Error::invalid("split ratios overflow the dataset"));
    }
    let n_test = n - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::invalid(format!(
            "split of {n} molecules by {ratios:?} leaves an empty part ({n_train}/{n_val}/{n_test})"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<_>> = dataset.molecules.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<_> { idx.iter().map(|&i| slots[i].take().expect("index used once")).collect() };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);

    let stats: Vec<TargetStats> = (0..dataset.target_names.len())
        .map(|t| {
            let values: Vec<f64> = train.iter().map(|m| m.graph.targets[t].1).collect();
            TargetStats::from_values(&values)
        })
        .collect();
    let make = |molecules| Dataset {
        molecules,
        target_names: dataset.target_names.clone(),
        target_stats: Some(stats.clone()),
    };
    Ok((make(train), make(val), make(test)))
}
