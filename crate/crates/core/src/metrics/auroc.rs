use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::ProbVector;

/// Rank-statistic AUROC; tied positive/negative pairs count one half.
/// `None` when either side is empty.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AurocResult {
    pub macro_auroc: f64,
    /// Per-class value; `None` where the class had no positives or no negatives.
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// One-vs-rest AUROC averaged over the classes that can be scored.
pub fn auroc_ovr_macro(probs: &[ProbVector], labels: &[usize]) -> Result<AurocResult> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::invalid("AUROC needs equal, non-empty inputs"));
    }
    let classes = probs[0].len();
    let mut per_class = Vec::with_capacity(classes);
    let mut skipped = Vec::new();
    for c in 0..classes {
        let scores: Vec<f64> = probs.iter().map(|p| p.get(c)).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        let a = binary_auroc(&scores, &pos);
        if a.is_none() {
            skipped.push(c);
        }
        per_class.push(a);
    }
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::invalid("no class has both positives and negatives"));
    }
    Ok(AurocResult {
        macro_auroc: scored.iter().sum::<f64>() / scored.len() as f64,
        per_class,
        skipped,
    })
}
