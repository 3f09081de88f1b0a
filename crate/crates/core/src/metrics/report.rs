use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{
    auroc_ovr_macro, bootstrap_ci, brier, cluster_geometry, ece, f1_scores, Ci, ConfusionMatrix, Geometry,
    ReliabilityBins, ECE_BINS,
};
use crate::error::{Error, Result};
use crate::math::{entropy, Matrix, ProbVector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    pub bootstrap: usize,
    pub seed: u64,
    pub ece_bins: usize,
    /// Geometry is computed on at most this many evenly strided rows.
    pub max_geometry_points: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            bootstrap: 1000,
            seed: 0,
            ece_bins: ECE_BINS,
            max_geometry_points: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub support: usize,
    pub predicted: usize,
    pub f1: f64,
    /// False when the class is absent from truth and prediction alike.
    pub in_macro: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetScores {
    pub n: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub classes: Vec<ClassRow>,
    pub confusion: Vec<Vec<u64>>,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub ece: f64,
    pub reliability: ReliabilityBins,
    pub brier: f64,
    pub auroc: Option<f64>,
    pub auroc_skipped: Vec<String>,
    pub geometry: Option<Geometry>,
    pub ci: BTreeMap<String, Ci>,
    /// Bottom quartile by confidence and top quartile by entropy.
    pub subsets: BTreeMap<String, SubsetScores>,
}

fn macro_f1_of(classes: usize, truth: &[usize], pred: &[usize]) -> Option<f64> {
    let m = ConfusionMatrix::from_pairs(classes, truth, pred).ok()?;
    f1_scores(&m).ok().map(|f| f.macro_f1)
}

fn quartile(keys: &[f64], largest: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| {
        let o = keys[a].total_cmp(&keys[b]);
        if largest { o.reverse() } else { o }.then(a.cmp(&b))
    });
    order.truncate(keys.len().div_ceil(4));
    order.sort_unstable();
    order
}

/// Scores for predictions `probs` against `labels`, with optional features
/// for cluster geometry.
pub fn metric_report(
    probs: &[ProbVector],
    labels: &[usize],
    class_names: &[String],
    features: Option<&Matrix>,
    opts: &ReportOptions,
) -> Result<MetricReport> {
    let n = probs.len();
    if n == 0 || labels.len() != n {
        return Err(Error::invalid(
            "report needs equal, non-empty predictions and labels",
        ));
    }
    let c = class_names.len();
    if probs.iter().any(|p| p.len() != c) {
        return Err(Error::dim(format!("predictions are not over {c} classes")));
    }
    let pred: Vec<usize> = probs.iter().map(|p| p.argmax()).collect();
    let conf = ConfusionMatrix::from_pairs(c, labels, &pred)?;
    let f1 = f1_scores(&conf)?;
    let p_max: Vec<f64> = probs.iter().map(|p| p.max()).collect();
    let correct: Vec<bool> = labels.iter().zip(&pred).map(|(a, b)| a == b).collect();
    let (e, reliability) = ece(&p_max, &correct, opts.ece_bins)?;
    let (auroc, auroc_skipped) = match auroc_ovr_macro(probs, labels) {
        Ok(r) => (
            Some(r.macro_auroc),
            r.skipped.iter().map(|&k| class_names[k].clone()).collect(),
        ),
        Err(_) => (None, class_names.to_vec()),
    };
    let geometry = match features {
        Some(x) => {
            if x.rows() != n {
                return Err(Error::dim("feature rows differ from prediction count"));
            }
            let stride = n.div_ceil(opts.max_geometry_points.max(1));
            let idx: Vec<usize> = (0..n).step_by(stride).collect();
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            cluster_geometry(&x.select_rows(&idx), &y).ok()
        }
        None => None,
    };

    let mut ci = BTreeMap::new();
    if opts.bootstrap > 0 {
        let macro_ci = bootstrap_ci(n, opts.bootstrap, opts.seed, |idx| {
            let t: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
            macro_f1_of(c, &t, &p)
        })?;
        let micro_ci = bootstrap_ci(n, opts.bootstrap, opts.seed, |idx| {
            Some(idx.iter().filter(|&&i| correct[i]).count() as f64 / idx.len() as f64)
        })?;
        ci.insert("macro_f1".to_string(), macro_ci);
        ci.insert("micro_f1".to_string(), micro_ci);
    }

    let entropies: Vec<f64> = probs.iter().map(entropy).collect();
    let mut subsets = BTreeMap::new();
    for (name, idx) in [
        ("low_confidence", quartile(&p_max, false)),
        ("high_entropy", quartile(&entropies, true)),
    ] {
        let t: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
        let hits = idx.iter().filter(|&&i| correct[i]).count();
        subsets.insert(
            name.to_string(),
            SubsetScores {
                n: idx.len(),
                accuracy: hits as f64 / idx.len() as f64,
                macro_f1: macro_f1_of(c, &t, &p).unwrap_or(0.0),
            },
        );
    }

    let classes = (0..c)
        .map(|k| ClassRow {
            class: class_names[k].clone(),
            support: conf.row_sum(k) as usize,
            predicted: conf.col_sum(k) as usize,
            f1: f1.per_class[k],
            in_macro: f1.present[k],
        })
        .collect();
    Ok(MetricReport {
        n,
        classes,
        confusion: conf.rows(),
        macro_f1: f1.macro_f1,
        micro_f1: f1.micro_f1,
        ece: e,
        reliability,
        brier: brier(probs, labels)?,
        auroc,
        auroc_skipped,
        geometry,
        ci,
        subsets,
    })
}

/// One evaluated (cohort, mode) pair inside a rendered table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub cohort: String,
    pub mode: String,
    pub report: MetricReport,
}

fn ci_text(r: &MetricReport, key: &str) -> String {
    r.ci.get(key).map(Ci::to_string).unwrap_or_default()
}

fn summary_rows(r: &MetricReport) -> Vec<(&'static str, String, String)> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "NA".into());
    let mut rows = vec![
        ("macro_f1", format!("{:.4}", r.macro_f1), ci_text(r, "macro_f1")),
        ("micro_f1", format!("{:.4}", r.micro_f1), ci_text(r, "micro_f1")),
        ("ece", format!("{:.4}", r.ece), String::new()),
        ("brier", format!("{:.4}", r.brier), String::new()),
        ("auroc", opt(r.auroc), String::new()),
    ];
    for (k, s) in &r.subsets {
        let name = if k == "low_confidence" {
            "low_confidence_macro_f1"
        } else {
            "high_entropy_macro_f1"
        };
        rows.push((name, format!("{:.4}", s.macro_f1), String::new()));
    }
    rows
}

/// Flat table: one row per (cohort, mode, class) followed by summary rows.
pub fn render_csv(entries: &[ReportEntry]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    w.write_record(["cohort", "mode", "row", "support", "value", "ci"])
        .map_err(io)?;
    for e in entries {
        for c in &e.report.classes {
            w.write_record([
                e.cohort.as_str(),
                e.mode.as_str(),
                c.class.as_str(),
                &c.support.to_string(),
                &format!("{:.4}", c.f1),
                "",
            ])
            .map_err(io)?;
        }
        for (name, value, ci) in summary_rows(&e.report) {
            w.write_record([
                e.cohort.as_str(),
                e.mode.as_str(),
                name,
                &e.report.n.to_string(),
                &value,
                &ci,
            ])
            .map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
}

/// Markdown with the same rows as [`render_csv`], one table per entry.
pub fn render_markdown(title: &str, header_notes: &[String], entries: &[ReportEntry]) -> String {
    let mut s = format!("# {title}\n\n");
    for note in header_notes {
        let _ = writeln!(s, "- {note}");
    }
    for e in entries {
        let _ = write!(s, "\n## {} / {}\n\n", e.cohort, e.mode);
        s.push_str("| row | support | value | ci |\n|---|---:|---:|---|\n");
        for c in &e.report.classes {
            let _ = writeln!(s, "| {} | {} | {:.4} |  |", c.class, c.support, c.f1);
        }
        for (name, value, ci) in summary_rows(&e.report) {
            let _ = writeln!(s, "| {name} | {} | {value} | {ci} |", e.report.n);
        }
    }
    s
}
