use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of the non-test bags moved to validation (75/25 of the 80% left
/// after a 5-fold test split gives 60/20/20).
pub const VALIDATION_SHARE: f64 = 0.25;

/// One cross-validation split; entries are bag indices, sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_index: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

fn members_by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

/// Stratified k-fold with a stratified validation carve-out per fold.
///
/// Members of each class are shuffled and dealt round-robin to the folds,
/// the starting fold rotating with the running class total so fold sizes
/// stay balanced. Fold `f` is the test set of split `f`; from the remaining
/// bags each class gives `round(VALIDATION_SHARE · n)` to validation.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("k = {k}, need at least 2 folds")));
    }
    let by_class = members_by_class(labels);
    for (c, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(Error::InvalidParameter(format!(
                "class {c} has {} bags, fewer than {k} folds",
                members.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; labels.len()];
    let mut dealt = 0;
    for members in &by_class {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for (j, &i) in shuffled.iter().enumerate() {
            fold_of[i] = (dealt + j) % k;
        }
        dealt += members.len();
    }

    let mut splits = Vec::with_capacity(k);
    for f in 0..k {
        let mut val_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000 ^ f as u64);
        let test: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == f).collect();
        let mut validation = Vec::new();
        let mut train = Vec::new();
        for members in &by_class {
            let mut rest: Vec<usize> = members.iter().copied().filter(|&i| fold_of[i] != f).collect();
            rest.shuffle(&mut val_rng);
            let n_val = (VALIDATION_SHARE * rest.len() as f64).round() as usize;
            validation.extend_from_slice(&rest[..n_val]);
            train.extend_from_slice(&rest[n_val..]);
        }
        train.sort_unstable();
        validation.sort_unstable();
        splits.push(FoldSplit {
            fold_index: f,
            train,
            validation,
            test,
        });
    }
    Ok(splits)
}

/// Class-balanced sampling with replacement: each training bag is drawn
/// with weight `1 / (size of its class in the training set)`, so every
/// class is expected to appear equally often.
pub fn balanced_bag_sampler(
    train: &[usize],
    labels: &[usize],
    seed: u64,
    epoch_length: usize,
) -> Result<Vec<usize>> {
    if train.is_empty() {
        return Err(Error::Empty("balanced sampler over an empty training set".into()));
    }
    let mut counts = std::collections::BTreeMap::new();
    for &i in train {
        let l = *labels
            .get(i)
            .ok_or_else(|| Error::InvalidParameter(format!("bag index {i} has no label")))?;
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let weights: Vec<f64> = train.iter().map(|&i| 1.0 / counts[&labels[i]] as f64).collect();
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| Error::InvalidParameter(format!("sampler weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..epoch_length).map(|_| train[dist.sample(&mut rng)]).collect())
}
