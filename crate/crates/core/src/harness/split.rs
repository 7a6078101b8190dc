use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::experiment::{derive_seed, HarnessError};
use crate::ingest::{InteractionStore, PairKey};

/// Interaction-level train/validation/test fractions and fold count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.7,
            val_frac: 0.15,
            test_frac: 0.15,
            folds: 5,
            seed: 0,
        }
    }
}

impl SplitSpec {
    /// Training share `x` percent, the rest halved between validation and
    /// test.
    pub fn sweep(train_percent: u32, folds: usize, seed: u64) -> Self {
        let train = train_percent as f64 / 100.0;
        let rest = (1.0 - train) / 2.0;
        Self {
            train_frac: train,
            val_frac: rest,
            test_frac: rest,
            folds,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(HarnessError::Split(format!(
                "fractions must lie in (0, 1): {fracs:?}"
            )));
        }
        if (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(HarnessError::Split(format!(
                "fractions must sum to 1: {fracs:?}"
            )));
        }
        if self.folds == 0 {
            return Err(HarnessError::Split("folds must be at least 1".into()));
        }
        Ok(())
    }

    /// Part sizes for `total` interactions: train and validation rounded,
    /// test takes the remainder.
    pub fn sizes(&self, total: usize) -> Result<(usize, usize, usize), HarnessError> {
        let train = (total as f64 * self.train_frac).round() as usize;
        let val = (total as f64 * self.val_frac).round() as usize;
        if train == 0 || val == 0 || train + val >= total {
            return Err(HarnessError::Split(format!(
                "{total} interactions are too few for a {}/{}/{} split",
                self.train_frac, self.val_frac, self.test_frac
            )));
        }
        Ok((train, val, total - train - val))
    }
}

/// One fold's disjoint parts, all in the parent's index space.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub fold: usize,
    pub train: InteractionStore,
    pub val: InteractionStore,
    pub test: InteractionStore,
}

/// Random partition for one fold; each fold reshuffles with its own seed.
pub fn split_fold(
    store: &InteractionStore,
    spec: &SplitSpec,
    fold: usize,
) -> Result<Split, HarnessError> {
    spec.validate()?;
    let mut pairs: Vec<PairKey> = store.omega().collect();
    let (n_train, n_val, _) = spec.sizes(pairs.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "split", fold as u64));
    pairs.shuffle(&mut rng);
    let mut part = std::collections::HashMap::with_capacity(pairs.len());
    for (pos, key) in pairs.iter().enumerate() {
        let which = if pos < n_train {
            0u8
        } else if pos < n_train + n_val {
            1
        } else {
            2
        };
        part.insert(*key, which);
    }
    let take = |which: u8| store.restrict(|k| part[&k] == which);
    Ok(Split {
        fold,
        train: take(0),
        val: take(1),
        test: take(2),
    })
}

pub fn split(store: &InteractionStore, spec: &SplitSpec) -> Result<Vec<Split>, HarnessError> {
    (0..spec.folds)
        .map(|f| split_fold(store, spec, f))
        .collect()
}
