//! Support-label flipping for noise-robustness experiments.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SupportQuerySplit;
use crate::{Error, Result};

/// Number of labels flipped per class: `fraction * shots`, rounded half up.
pub fn flip_count(fraction: f64, shots: usize) -> usize {
    (fraction * shots as f64 + 0.5).floor() as usize
}

pub fn flip_labels(split: &SupportQuerySplit, fraction: f64, seed: u64) -> Result<SupportQuerySplit> {
    Ok(flip_labels_with_mask(split, fraction, seed)?.0)
}

/// Flips exactly `flip_count(fraction, K)` support labels in every class and
/// returns the new split plus a per-support-row "was flipped" mask.
///
/// The flipped rows of all classes pool their original labels, and those
/// labels are redistributed among them by a seeded random assignment in
/// which no row keeps its own label. Every flipped row therefore receives a
/// label from one of the other classes, and every class still ends up with
/// exactly `K` support rows.
pub fn flip_labels_with_mask(
    split: &SupportQuerySplit,
    fraction: f64,
    seed: u64,
) -> Result<(SupportQuerySplit, Vec<bool>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::arg(format!("flip fraction {fraction} outside [0, 1]")));
    }
    let by_class = split.support.indices_by_class()?;
    let orig = split.support.require_labels()?.to_vec();
    let n = flip_count(fraction, split.shots);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = Vec::with_capacity(n * by_class.len());
    for rows in &by_class {
        let mut picks: Vec<usize> = index::sample(&mut rng, rows.len(), n)
            .into_iter()
            .map(|i| rows[i])
            .collect();
        picks.sort_unstable();
        chosen.extend(picks);
    }

    let mut assigned: Vec<u32> = chosen.iter().map(|&r| orig[r]).collect();
    assigned.shuffle(&mut rng);
    // Repair rows that drew their own label. A swap partner always exists
    // (each class gives and receives exactly n labels, C >= 2), and a swap
    // never creates a new conflict.
    for i in 0..chosen.len() {
        let own = orig[chosen[i]];
        if assigned[i] != own {
            continue;
        }
        let candidates: Vec<usize> = (0..chosen.len())
            .filter(|&j| assigned[j] != own && orig[chosen[j]] != assigned[i])
            .collect();
        let j = candidates[rng.random_range(0..candidates.len())];
        assigned.swap(i, j);
    }

    let mut labels = orig;
    let mut mask = vec![false; labels.len()];
    for (&row, &y) in chosen.iter().zip(&assigned) {
        labels[row] = y;
        mask[row] = true;
    }
    let mut out = split.clone();
    out.support.labels = Some(labels);
    out.check()?;
    Ok((out, mask))
}
