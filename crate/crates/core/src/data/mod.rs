//! Cell-level feature datasets: taxonomy, records, synthetic generation, file
//! formats and cohort splits.

mod io;
mod split;
mod synth;

pub use io::{read_csv, read_ndjson, read_records, write_csv, write_ndjson, write_records, Format};
pub use split::{random_split, CohortSplit};
pub use synth::{generate, ClassSpec, Separability, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;

/// Ordered class and tissue names; indices are positions in these lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTaxonomy", into = "RawTaxonomy")]
pub struct Taxonomy {
    classes: Vec<String>,
    tissues: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RawTaxonomy {
    classes: Vec<String>,
    tissues: Vec<String>,
}

impl TryFrom<RawTaxonomy> for Taxonomy {
    type Error = Error;
    fn try_from(r: RawTaxonomy) -> Result<Self> {
        Taxonomy::new(r.classes, r.tissues)
    }
}

impl From<Taxonomy> for RawTaxonomy {
    fn from(t: Taxonomy) -> Self {
        RawTaxonomy {
            classes: t.classes,
            tissues: t.tissues,
        }
    }
}

fn check_unique(kind: &str, names: &[String]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::config(format!("duplicate {kind} name {n:?}")));
        }
    }
    Ok(())
}

impl Taxonomy {
    pub fn new(classes: Vec<String>, tissues: Vec<String>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::config("taxonomy needs at least two classes"));
        }
        if tissues.is_empty() {
            return Err(Error::config("taxonomy needs at least one tissue"));
        }
        check_unique("class", &classes)?;
        check_unique("tissue", &tissues)?;
        Ok(Self { classes, tissues })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn tissues(&self) -> &[String] {
        &self.tissues
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_tissues(&self) -> usize {
        self.tissues.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn tissue_index(&self, name: &str) -> Option<usize> {
        self.tissues.iter().position(|t| t == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub cell_id: String,
    pub tissue: usize,
    pub label: Option<usize>,
    pub local: Vec<f64>,
    pub ctx: Vec<f64>,
}

/// Records sharing one taxonomy and feature widths.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub taxonomy: Taxonomy,
    pub d_local: usize,
    pub d_ctx: usize,
    pub records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn new(taxonomy: Taxonomy, d_local: usize, d_ctx: usize) -> Self {
        Self {
            taxonomy,
            d_local,
            d_ctx,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks one record against the taxonomy and widths.
    pub fn validate_record(&self, r: &FeatureRecord) -> std::result::Result<(), String> {
        if r.local.len() != self.d_local {
            return Err(format!(
                "local feature has {} values, expected {}",
                r.local.len(),
                self.d_local
            ));
        }
        if r.ctx.len() != self.d_ctx {
            return Err(format!(
                "ctx feature has {} values, expected {}",
                r.ctx.len(),
                self.d_ctx
            ));
        }
        if r.tissue >= self.taxonomy.num_tissues() {
            return Err(format!("tissue index {} out of range", r.tissue));
        }
        if let Some(y) = r.label {
            if y >= self.taxonomy.num_classes() {
                return Err(format!("label index {y} out of range"));
            }
        }
        if r.local.iter().chain(&r.ctx).any(|v| !v.is_finite()) {
            return Err("non-finite feature value".into());
        }
        Ok(())
    }

    pub fn push(&mut self, r: FeatureRecord) -> Result<()> {
        self.validate_record(&r).map_err(Error::invalid)?;
        self.records.push(r);
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            taxonomy: self.taxonomy.clone(),
            d_local: self.d_local,
            d_ctx: self.d_ctx,
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn local_matrix(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.d_local);
        for &i in idx {
            data.extend_from_slice(&self.records[i].local);
        }
        Matrix::from_vec(idx.len(), self.d_local, data).expect("shape")
    }

    pub fn ctx_matrix(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.d_ctx);
        for &i in idx {
            data.extend_from_slice(&self.records[i].ctx);
        }
        Matrix::from_vec(idx.len(), self.d_ctx, data).expect("shape")
    }

    pub fn tissues(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.records[i].tissue).collect()
    }

    /// Labels for `idx`; errors on the first unlabeled record.
    pub fn labels(&self, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter()
            .map(|&i| {
                self.records[i]
                    .label
                    .ok_or_else(|| Error::invalid(format!("record {} is unlabeled", self.records[i].cell_id)))
            })
            .collect()
    }

    pub fn all_labels(&self) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.labels(&idx)
    }
}

/// Per-class record counts; every record must be labeled.
pub fn class_counts(ds: &Dataset) -> Result<Vec<usize>> {
    let mut counts = vec![0; ds.taxonomy.num_classes()];
    for r in &ds.records {
        let y = r
            .label
            .ok_or_else(|| Error::invalid(format!("record {} is unlabeled", r.cell_id)))?;
        counts[y] += 1;
    }
    Ok(counts)
}
