//! Entropy-based discretization with the minimum-description-length stopping
//! rule: recursive binary splitting at class-boundary midpoints, accepting a
//! split only when the information gain pays for the extra partition cost.

use super::{Discretizer, RawDataset};

/// Learns per-feature cut points. Features where no split ever passes the MDL
/// test (constant features included) end up with a single bin.
pub fn mdl_discretize(data: &RawDataset) -> Discretizer {
    let mut cut_points = Vec::with_capacity(data.num_features);
    for f in 0..data.num_features {
        let mut pairs: Vec<(f64, usize)> = (0..data.len())
            .map(|n| (data.row(n)[f], data.labels[n]))
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut cuts = Vec::new();
        if pairs.len() >= 2 {
            split_recursive(&pairs, data.num_classes, &mut cuts);
        }
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cut_points.push(cuts);
    }
    Discretizer { cut_points }
}

/// Shannon entropy in bits of a class-count vector.
fn entropy(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn distinct_classes(counts: &[usize]) -> usize {
    counts.iter().filter(|&&c| c > 0).count()
}

/// Recursively splits a value-sorted slice, appending accepted cut values.
fn split_recursive(pairs: &[(f64, usize)], num_classes: usize, cuts: &mut Vec<f64>) {
    let n = pairs.len();
    let mut total = vec![0usize; num_classes];
    for &(_, c) in pairs {
        total[c] += 1;
    }
    let k = distinct_classes(&total);
    if n < 2 || k < 2 {
        return;
    }
    let e = entropy(&total, n);

    // Scan boundaries between groups of equal values, tracking class counts
    // to the left. A boundary qualifies as a candidate unless the two
    // adjacent groups are pure with the same class (no optimal cut can sit
    // there).
    let mut left = vec![0usize; num_classes];
    let mut best: Option<(usize, f64, f64, f64)> = None; // (split index, gain, e1, e2)
    let mut group_start = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pairs[j + 1].0 == pairs[i].0 {
            j += 1;
        }
        // Group is pairs[i..=j]; boundary before it (unless it is the first).
        if i > 0 {
            let prev_pure = single_class(&pairs[group_start..i]);
            let this_pure = single_class(&pairs[i..=j]);
            let skip = matches!((prev_pure, this_pure), (Some(a), Some(b)) if a == b);
            if !skip {
                let n1 = i;
                let n2 = n - i;
                let mut right = vec![0usize; num_classes];
                for (t, r) in right.iter_mut().enumerate() {
                    *r = total[t] - left[t];
                }
                let e1 = entropy(&left, n1);
                let e2 = entropy(&right, n2);
                let gain = e - (n1 as f64 / n as f64) * e1 - (n2 as f64 / n as f64) * e2;
                if best.map_or(true, |(_, g, _, _)| gain > g) {
                    best = Some((i, gain, e1, e2));
                }
            }
            group_start = i;
        }
        for &(_, c) in &pairs[i..=j] {
            left[c] += 1;
        }
        i = j + 1;
    }

    let Some((split, gain, e1, e2)) = best else {
        return;
    };

    // MDL acceptance: gain must exceed (log2(n-1) + delta)/n where delta
    // accounts for the classes present on each side.
    let mut left_counts = vec![0usize; num_classes];
    for &(_, c) in &pairs[..split] {
        left_counts[c] += 1;
    }
    let mut right_counts = vec![0usize; num_classes];
    for (t, r) in right_counts.iter_mut().enumerate() {
        *r = total[t] - left_counts[t];
    }
    let k1 = distinct_classes(&left_counts) as f64;
    let k2 = distinct_classes(&right_counts) as f64;
    let kf = k as f64;
    let delta = (3f64.powi(k as i32) - 2.0).log2() - (kf * e - k1 * e1 - k2 * e2);
    let threshold = (((n - 1) as f64).log2() + delta) / n as f64;
    if gain <= threshold {
        return;
    }

    cuts.push((pairs[split - 1].0 + pairs[split].0) / 2.0);
    split_recursive(&pairs[..split], num_classes, cuts);
    split_recursive(&pairs[split..], num_classes, cuts);
}

/// `Some(class)` when every pair in the slice shares one class.
fn single_class(pairs: &[(f64, usize)]) -> Option<usize> {
    let first = pairs.first()?.1;
    pairs.iter().all(|&(_, c)| c == first).then_some(first)
}
