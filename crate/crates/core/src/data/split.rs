use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint train/val/test index lists over one dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Name of the evaluation taxonomy (projection fixture) for this cohort.
    #[serde(default)]
    pub cohort: Option<String>,
}

impl CohortSplit {
    /// Checks disjointness and that the lists cover `0..n` exactly.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n {
                return Err(Error::invalid(format!(
                    "split index {i} out of range for {n} records"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid(format!("split index {i} appears twice")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("split does not cover every record"));
        }
        Ok(())
    }
}

/// Shuffled split with `val` and `test` records held out; the rest train.
pub fn random_split(n: usize, val: usize, test: usize, rng: &mut impl Rng) -> Result<CohortSplit> {
    if val + test > n {
        return Err(Error::config(format!(
            "cannot hold out {val}+{test} of {n} records"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let test_idx = idx.split_off(n - test);
    let val_idx = idx.split_off(n - test - val);
    Ok(CohortSplit {
        train: idx,
        val: val_idx,
        test: test_idx,
        cohort: None,
    })
}
