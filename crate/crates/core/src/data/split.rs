use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, TAG_SPLIT, TAG_SUBSAMPLE};

/// Disjoint train/val/test index lists covering a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub fractions: [f64; 3],
}

/// Floor of `fraction * n`, tolerant of products such as `0.29 * 100`
/// landing one ulp below an integer.
pub(crate) fn floor_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    (x + 1e-9 * x.max(1.0)).floor() as usize
}

/// Splits `n` indices into (train, val, test) by `fractions`.
///
/// Validation and test sizes are `floor(f * n)`; the remainder goes to
/// train. Each list is returned sorted ascending.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} must be non-negative"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split fractions sum to {total}, expected 1")));
    }
    let n_val = floor_count(fractions[1], n);
    let n_test = floor_count(fractions[2], n);
    let n_train = n - n_val - n_test;

    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(seed, &[TAG_SPLIT, n as u64]));
    let take = |range: std::ops::Range<usize>| {
        let mut v = perm[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(SplitAssignment {
        train: take(0..n_train),
        val: take(n_train..n_train + n_val),
        test: take(n_train + n_val..n),
        seed,
        fractions,
    })
}

/// One label-fraction downsampling of a train split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsampleSpec {
    pub fraction: f64,
    pub seed: u64,
    pub replicate_index: u32,
}

/// Draws `floor(fraction * |train|)` indices without replacement.
///
/// `fraction = 1` returns the input list unchanged; otherwise the subset is
/// sorted ascending.
pub fn subsample_labeled(train_indices: &[usize], spec: &SubsampleSpec) -> Result<Vec<usize>> {
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "label fraction {} must be in (0,1]",
            spec.fraction
        )));
    }
    if spec.fraction == 1.0 {
        return Ok(train_indices.to_vec());
    }
    let k = floor_count(spec.fraction, train_indices.len());
    let mut rng = seed::rng(
        spec.seed,
        &[TAG_SUBSAMPLE, spec.fraction.to_bits(), u64::from(spec.replicate_index)],
    );
    let mut picked: Vec<usize> = train_indices.choose_multiple(&mut rng, k).copied().collect();
    picked.sort_unstable();
    Ok(picked)
}
