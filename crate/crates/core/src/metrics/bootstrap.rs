use std::fmt;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const BOOTSTRAP_STREAM: &str = "bootstrap";

/// Percentile bootstrap interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ci {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    /// Resamples where the metric was defined.
    pub resamples: usize,
}

impl fmt::Display for Ci {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ({:.4}, {:.4})", self.mean, self.lo, self.hi)
    }
}

/// Linear interpolation between closest ranks of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Draws the sample indices of resample `b`.
pub fn resample_indices(n: usize, seed: u64, b: usize) -> Vec<usize> {
    let mut rng = seed::indexed(seed, BOOTSTRAP_STREAM, b as u64);
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// 95% interval of `metric` over `b` resamples of `n` items. Resamples where the
/// metric is undefined (`None` or non-finite) are left out.
pub fn bootstrap_ci<F>(n: usize, b: usize, seed: u64, metric: F) -> Result<Ci>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    if n == 0 || b == 0 {
        return Err(Error::invalid(
            "bootstrap needs at least one sample and one resample",
        ));
    }
    let values: Vec<Option<f64>> = (0..b)
        .into_par_iter()
        .map(|i| metric(&resample_indices(n, seed, i)).filter(|v| v.is_finite()))
        .collect();
    let mut v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return Err(Error::invalid("metric undefined on every resample"));
    }
    v.sort_by(f64::total_cmp);
    Ok(Ci {
        mean: v.iter().sum::<f64>() / v.len() as f64,
        lo: percentile(&v, 0.025),
        hi: percentile(&v, 0.975),
        resamples: v.len(),
    })
}
