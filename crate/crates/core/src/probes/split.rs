//! Cross-validation folds for variant fitness data.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitScheme {
    /// Examples shuffled and dealt round-robin.
    Random,
    /// The sequence is cut into equal blocks; a variant's fold is the block
    /// holding its first mutated position.
    Contiguous,
    /// First mutated position modulo the fold count.
    Modulo,
}

impl SplitScheme {
    pub const ALL: [SplitScheme; 3] = [Self::Random, Self::Contiguous, Self::Modulo];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Contiguous => "contiguous",
            Self::Modulo => "modulo",
        }
    }
}

impl fmt::Display for SplitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split scheme `{s}`")))
    }
}

pub const N_FOLDS: usize = 5;

/// Fold index of every example. `positions` holds each example's first
/// mutated position (0-based) and `seq_len` the wildtype length.
pub fn assign_folds(
    scheme: SplitScheme,
    positions: &[usize],
    seq_len: usize,
    n_folds: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if n_folds < 3 {
        return Err(Error::Config(format!(
            "need at least 3 folds for train/validation/test, got {n_folds}"
        )));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= seq_len) {
        return Err(Error::InvalidInput(format!(
            "mutated position {p} outside a sequence of length {seq_len}"
        )));
    }
    Ok(match scheme {
        SplitScheme::Random => {
            let mut order: Vec<usize> = (0..positions.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut folds = vec![0; positions.len()];
            for (rank, &i) in order.iter().enumerate() {
                folds[i] = rank % n_folds;
            }
            folds
        }
        SplitScheme::Contiguous => positions.iter().map(|&p| p * n_folds / seq_len).collect(),
        SplitScheme::Modulo => positions.iter().map(|&p| p % n_folds).collect(),
    })
}

/// Example indices for one cross-validation round: fold `test` is held out,
/// the next fold is used for early stopping and the rest for training.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub test_fold: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn fold_split(folds: &[usize], n_folds: usize, test_fold: usize) -> FoldSplit {
    let val_fold = (test_fold + 1) % n_folds;
    let mut split = FoldSplit {
        test_fold,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (i, &f) in folds.iter().enumerate() {
        if f == test_fold {
            split.test.push(i);
        } else if f == val_fold {
            split.validation.push(i);
        } else {
            split.train.push(i);
        }
    }
    split
}
