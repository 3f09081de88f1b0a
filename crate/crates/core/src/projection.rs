//! Binary train→eval label-space projection, `p_eval = Mᵀ p_train`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::math::{Matrix, ProbVector};

pub const PROJECTION_SCHEMA: &str = "nuclass-proj/1";

const BUILTIN: [(&str, &str); 4] = [
    ("toy", include_str!("../fixtures/toy.json")),
    ("lung", include_str!("../fixtures/lung.json")),
    ("ovary", include_str!("../fixtures/ovary.json")),
    ("pancreas", include_str!("../fixtures/pancreas.json")),
];

/// Ordered `train name → eval name | null` pairs; duplicate keys are kept so
/// that validation can reject them.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Mapping(pub Vec<(String, Option<String>)>);

impl<'de> Deserialize<'de> for Mapping {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Mapping;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping training class names to evaluation names or null")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut m: A) -> std::result::Result<Mapping, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = m.next_entry::<String, Option<String>>()? {
                    out.push((k, v));
                }
                Ok(Mapping(out))
            }
        }
        d.deserialize_map(V)
    }
}

impl Serialize for Mapping {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

/// On-disk projection document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionFile {
    pub schema: String,
    pub train_classes: Vec<String>,
    pub eval_classes: Vec<String>,
    pub map: Mapping,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionMatrix {
    train_classes: Vec<String>,
    eval_classes: Vec<String>,
    /// Eval column of each training row, `None` for dropped rows.
    target: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedPrediction {
    /// Sums to 1 when `renormalized`, to `1 − dropped_mass` otherwise.
    pub p_eval: Vec<f64>,
    pub dropped_mass: f64,
    pub renormalized: bool,
}

impl ProjectedPrediction {
    pub fn as_prob(&self) -> Result<ProbVector> {
        ProbVector::new(self.p_eval.clone())
    }
}

fn index_of(names: &[String]) -> Result<HashMap<&str, usize>> {
    let mut m = HashMap::new();
    for (i, n) in names.iter().enumerate() {
        if m.insert(n.as_str(), i).is_some() {
            return Err(Error::config(format!("duplicate class name {n:?} in projection")));
        }
    }
    Ok(m)
}

impl ProjectionMatrix {
    /// `M_ij = 1` iff training class `i` maps to eval class `j`.
    pub fn build(mapping: &Mapping, train: &[String], eval: &[String]) -> Result<Self> {
        let ti = index_of(train)?;
        let ei = index_of(eval)?;
        let mut target: Vec<Option<Option<usize>>> = vec![None; train.len()];
        for (k, v) in &mapping.0 {
            let &i = ti
                .get(k.as_str())
                .ok_or_else(|| Error::config(format!("mapping names unknown training class {k:?}")))?;
            if target[i].is_some() {
                return Err(Error::config(format!(
                    "training class {k:?} is mapped more than once"
                )));
            }
            let j =
                match v {
                    None => None,
                    Some(e) => Some(*ei.get(e.as_str()).ok_or_else(|| {
                        Error::config(format!("mapping names unknown evaluation class {e:?}"))
                    })?),
                };
            target[i] = Some(j);
        }
        let target: Vec<Option<usize>> = target
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                t.ok_or_else(|| Error::config(format!("training class {:?} is not mapped", train[i])))
            })
            .collect::<Result<_>>()?;
        Self::from_targets(target, train.to_vec(), eval.to_vec())
    }

    /// Validates a dense 0/1 matrix.
    pub fn from_matrix(m: &Matrix, train: &[String], eval: &[String]) -> Result<Self> {
        if m.shape() != (train.len(), eval.len()) {
            return Err(Error::dim(format!(
                "projection matrix is {}x{}, names give {}x{}",
                m.rows(),
                m.cols(),
                train.len(),
                eval.len()
            )));
        }
        let mut target = Vec::with_capacity(train.len());
        for (i, name) in train.iter().enumerate() {
            let row = m.row(i);
            if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::config(format!(
                    "row {name} of the projection is not binary"
                )));
            }
            let ones: Vec<usize> = (0..row.len()).filter(|&j| row[j] == 1.0).collect();
            match ones.as_slice() {
                [] => target.push(None),
                [j] => target.push(Some(*j)),
                _ => {
                    return Err(Error::config(format!(
                        "training class {:?} maps to several evaluation classes",
                        train[i]
                    )))
                }
            }
        }
        Self::from_targets(target, train.to_vec(), eval.to_vec())
    }

    fn from_targets(target: Vec<Option<usize>>, train: Vec<String>, eval: Vec<String>) -> Result<Self> {
        index_of(&train)?;
        index_of(&eval)?;
        for (j, name) in eval.iter().enumerate() {
            if !target.contains(&Some(j)) {
                return Err(Error::config(format!(
                    "evaluation class {name:?} has no source class"
                )));
            }
        }
        Ok(Self {
            train_classes: train,
            eval_classes: eval,
            target,
        })
    }

    pub fn from_file(f: &ProjectionFile) -> Result<Self> {
        if f.schema != PROJECTION_SCHEMA {
            return Err(Error::config(format!(
                "unsupported projection schema {:?}",
                f.schema
            )));
        }
        Self::build(&f.map, &f.train_classes, &f.eval_classes)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(&serde_json::from_str(text)?)
    }

    /// Loads `toy`, `lung`, `ovary`, `pancreas`, or a path to a projection file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if let Some((_, text)) = BUILTIN.iter().find(|(n, _)| *n == name_or_path) {
            return Self::from_json(text);
        }
        let p = Path::new(name_or_path);
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Self::from_json(&text)
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTIN.iter().map(|(n, _)| *n)
    }

    pub fn to_file(&self) -> ProjectionFile {
        ProjectionFile {
            schema: PROJECTION_SCHEMA.into(),
            train_classes: self.train_classes.clone(),
            eval_classes: self.eval_classes.clone(),
            map: Mapping(
                self.train_classes
                    .iter()
                    .zip(&self.target)
                    .map(|(t, j)| (t.clone(), j.map(|j| self.eval_classes[j].clone())))
                    .collect(),
            ),
        }
    }

    pub fn identity(classes: &[String]) -> Result<Self> {
        Self::from_targets(
            (0..classes.len()).map(Some).collect(),
            classes.to_vec(),
            classes.to_vec(),
        )
    }

    pub fn train_classes(&self) -> &[String] {
        &self.train_classes
    }

    pub fn eval_classes(&self) -> &[String] {
        &self.eval_classes
    }

    pub fn dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.train_classes.len(), self.eval_classes.len());
        for (i, t) in self.target.iter().enumerate() {
            if let Some(j) = t {
                m.set(i, *j, 1.0);
            }
        }
        m
    }

    /// Same projection with rows reordered to match `train` by name.
    pub fn aligned_to(&self, train: &[String]) -> Result<Self> {
        let idx = index_of(&self.train_classes)?;
        let target = train
            .iter()
            .map(|n| {
                idx.get(n.as_str())
                    .map(|&i| self.target[i])
                    .ok_or_else(|| Error::config(format!("projection does not cover training class {n:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if train.len() != self.train_classes.len() {
            return Err(Error::config(
                "projection lists training classes the model does not have",
            ));
        }
        Self::from_targets(target, train.to_vec(), self.eval_classes.clone())
    }

    /// `Mᵀ p`, plus the mass on dropped rows; optionally renormalized.
    pub fn project(&self, p: &[f64], renormalize: bool) -> Result<ProjectedPrediction> {
        if p.len() != self.target.len() {
            return Err(Error::dim(format!(
                "projecting {} probabilities through a {}-row matrix",
                p.len(),
                self.target.len()
            )));
        }
        let mut out = vec![0.0; self.eval_classes.len()];
        let mut dropped = 0.0;
        for (&v, t) in p.iter().zip(&self.target) {
            match t {
                Some(j) => out[*j] += v,
                None => dropped += v,
            }
        }
        if renormalize && dropped > 0.0 {
            let kept: f64 = out.iter().sum();
            if kept <= 0.0 {
                return Err(Error::Numerical(
                    "all probability mass sits on dropped classes; cannot renormalize".into(),
                ));
            }
            for v in &mut out {
                *v /= kept;
            }
        }
        // Merged rows can round past 1 by an ulp.
        for v in &mut out {
            *v = v.min(1.0);
        }
        Ok(ProjectedPrediction {
            p_eval: out,
            dropped_mass: dropped,
            renormalized: renormalize,
        })
    }

    /// Eval class of training label `y`, `None` when the row is dropped.
    pub fn project_label(&self, y: usize) -> Option<usize> {
        self.target[y]
    }
}
