//! Seeded k-fold assignment of subjects.

use clseg_core::rng::stream_rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

const FOLD_STREAM: u64 = 0xF01D;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub seed: u64,
    /// Test subjects of each fold, sorted.
    pub folds: Vec<Vec<String>>,
}

impl FoldSplit {
    /// Subjects are sorted, shuffled by `seed` and dealt round-robin, so
    /// fold sizes differ by at most one and the split depends only on the
    /// seed and the set of ids.
    pub fn new(ids: &[String], k: usize, seed: u64) -> CliResult<Self> {
        if k < 2 {
            return Err(CliError::Usage(format!("need at least 2 folds, got {k}")));
        }
        if k > ids.len() {
            return Err(CliError::Usage(format!("{k} folds requested for {} subjects", ids.len())));
        }
        let mut order = ids.to_vec();
        order.sort();
        if order.windows(2).any(|w| w[0] == w[1]) {
            return Err(CliError::Usage("duplicate subject ids".into()));
        }
        order.shuffle(&mut stream_rng(seed, &[FOLD_STREAM]));
        let mut folds = vec![Vec::new(); k];
        for (i, id) in order.into_iter().enumerate() {
            folds[i % k].push(id);
        }
        for f in &mut folds {
            f.sort();
        }
        Ok(Self { seed, folds })
    }

    pub fn test_ids(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        let mut ids: Vec<String> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        ids.sort();
        ids
    }
}
