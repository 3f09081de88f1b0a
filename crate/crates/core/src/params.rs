//! Named parameter tensors with trainability flags and group tags.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::tape::{ParamKey, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    /// Learning-rate group (`film`, `head`, `proj`, `gate`, ...).
    pub group: String,
    pub value: Matrix,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    id: u32,
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(id: u32) -> Self {
        Self {
            id,
            params: Vec::new(),
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, group: &str, value: Matrix) -> usize {
        self.params.push(Param {
            name: name.into(),
            group: group.to_string(),
            value,
            trainable: true,
        });
        self.params.len() - 1
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn value(&self, i: usize) -> &Matrix {
        &self.params[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Matrix {
        &mut self.params[i].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn key(&self, i: usize) -> ParamKey {
        ParamKey {
            store: self.id,
            index: i,
        }
    }

    /// Puts slot `i` on the tape: a gradient leaf when trainable, a constant otherwise.
    pub fn var(&self, tape: &mut Tape, i: usize) -> Var {
        let p = &self.params[i];
        if p.trainable {
            tape.param(self.key(i), &p.value)
        } else {
            tape.constant(p.value.clone())
        }
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Sets the flag on every parameter whose group is in `groups`; returns how many matched.
    pub fn set_group_trainable(&mut self, groups: &[&str], trainable: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if groups.contains(&p.group.as_str()) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn to_named(&self) -> BTreeMap<String, Matrix> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites every parameter from a name-keyed map with matching shapes.
    pub fn load_named(&mut self, map: &BTreeMap<String, Matrix>) -> Result<()> {
        for p in &mut self.params {
            let m = map
                .get(&p.name)
                .ok_or_else(|| Error::config(format!("checkpoint lacks parameter {}", p.name)))?;
            if m.shape() != p.value.shape() {
                return Err(Error::dim(format!(
                    "parameter {} has shape {:?} in checkpoint, expected {:?}",
                    p.name,
                    m.shape(),
                    p.value.shape()
                )));
            }
            if !m.is_finite() {
                return Err(Error::Numerical(format!("parameter {} is not finite", p.name)));
            }
            p.value = m.clone();
        }
        Ok(())
    }
}

/// Uniform in `±1/sqrt(fan_in)`, the fan-in scaled Kaiming-uniform default for linear layers.
pub fn kaiming_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("shape")
}

pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}
