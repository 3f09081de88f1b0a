//! Evaluation scores over single-label predictions.

mod auroc;
mod bootstrap;
mod cluster;
mod report;

pub use auroc::{auroc_ovr_macro, binary_auroc, AurocResult};
pub use bootstrap::{bootstrap_ci, percentile, Ci};
pub use cluster::{calinski_harabasz, cluster_geometry, davies_bouldin, silhouette, Geometry};
pub use report::{
    metric_report, render_csv, render_markdown, ClassRow, MetricReport, ReportEntry, ReportOptions,
    SubsetScores,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::ProbVector;

pub const ECE_BINS: usize = 15;

/// Counts with rows indexed by truth and columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_pairs(classes: usize, truth: &[usize], pred: &[usize]) -> Result<Self> {
        if truth.len() != pred.len() {
            return Err(Error::dim("truth and prediction lengths differ"));
        }
        let mut m = Self::new(classes);
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= classes || p >= classes {
                return Err(Error::invalid(format!(
                    "class index out of range for {classes} classes"
                )));
            }
            m.counts[t * classes + p] += 1;
        }
        Ok(m)
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::dim("confusion matrix must be square"));
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub per_class: Vec<f64>,
    /// False for classes absent from both truth and prediction; those are
    /// left out of the macro average.
    pub present: Vec<bool>,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

pub fn f1_scores(conf: &ConfusionMatrix) -> Result<F1Scores> {
    let total = conf.total();
    if total == 0 {
        return Err(Error::invalid("F1 of an empty confusion matrix"));
    }
    let mut per_class = Vec::with_capacity(conf.classes());
    let mut present = Vec::with_capacity(conf.classes());
    for c in 0..conf.classes() {
        let tp = conf.get(c, c) as f64;
        let truth = conf.row_sum(c) as f64;
        let pred = conf.col_sum(c) as f64;
        present.push(truth > 0.0 || pred > 0.0);
        // 2PR/(P+R) = 2TP/(truth+pred); 0 when the class is never hit.
        per_class.push(if tp == 0.0 { 0.0 } else { 2.0 * tp / (truth + pred) });
    }
    let used: Vec<f64> = per_class
        .iter()
        .zip(&present)
        .filter(|(_, &p)| p)
        .map(|(&f, _)| f)
        .collect();
    Ok(F1Scores {
        macro_f1: used.iter().sum::<f64>() / used.len() as f64,
        micro_f1: conf.trace() as f64 / total as f64,
        per_class,
        present,
    })
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(Error::invalid("accuracy needs equal, non-empty label lists"));
    }
    let hits = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    /// Mean confidence per bin (0 for empty bins).
    pub confidence: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub count: Vec<usize>,
}

/// Bin `k` covers `[k/B, (k+1)/B)`; confidence 1 falls in the last bin.
pub fn bin_index(conf: f64, bins: usize) -> usize {
    ((conf * bins as f64).floor() as usize).min(bins - 1)
}

/// Expected calibration error over equal-width confidence bins.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<(f64, ReliabilityBins)> {
    if bins == 0 {
        return Err(Error::config("ECE needs at least one bin"));
    }
    if confidences.is_empty() || confidences.len() != correct.len() {
        return Err(Error::invalid("ECE needs equal, non-empty inputs"));
    }
    let mut conf_sum = vec![0.0; bins];
    let mut hit = vec![0usize; bins];
    let mut count = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::invalid(format!("confidence {c} outside [0, 1]")));
        }
        let b = bin_index(c, bins);
        conf_sum[b] += c;
        count[b] += 1;
        hit[b] += ok as usize;
    }
    let n = confidences.len() as f64;
    let mut e = 0.0;
    let mut out = ReliabilityBins {
        confidence: vec![0.0; bins],
        accuracy: vec![0.0; bins],
        count: count.clone(),
    };
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let nb = count[b] as f64;
        out.confidence[b] = conf_sum[b] / nb;
        out.accuracy[b] = hit[b] as f64 / nb;
        e += nb / n * (out.accuracy[b] - out.confidence[b]).abs();
    }
    Ok((e, out))
}

/// Mean over samples of `Σ_c (p_c − 1[c = y])²`.
pub fn brier(probs: &[ProbVector], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::invalid("Brier score needs equal, non-empty inputs"));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| {
            p.as_slice()
                .iter()
                .enumerate()
                .map(|(c, &v)| {
                    let d = v - if c == y { 1.0 } else { 0.0 };
                    d * d
                })
                .sum::<f64>()
        })
        .sum();
    Ok(total / probs.len() as f64)
}
