//! Shared synthetic-data builders for the benchmark targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bnc_core::{DiscreteDataset, RawDataset};

/// Discrete dataset with `n` rows over `d` ternary features and two classes;
/// the first feature tracks the label, the rest are noise.
pub fn discrete_dataset(n: usize, d: usize, seed: u64) -> DiscreteDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_range(0..2usize);
        labels.push(y);
        for f in 0..d {
            if f == 0 && rng.random::<f64>() < 0.8 {
                samples.push(y);
            } else {
                samples.push(rng.random_range(0..3usize));
            }
        }
    }
    DiscreteDataset { samples, labels, cardinalities: vec![3; d], num_classes: 2 }
}

/// Real-valued dataset matching `discrete_dataset`, for network training.
pub fn raw_dataset(n: usize, d: usize, seed: u64) -> RawDataset {
    let disc = discrete_dataset(n, d, seed);
    RawDataset {
        samples: disc.samples.iter().map(|&v| v as f64 - 1.0).collect(),
        labels: disc.labels,
        num_features: d,
        num_classes: 2,
        names: None,
    }
}
