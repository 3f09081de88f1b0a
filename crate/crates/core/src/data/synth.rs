//! Gaussian feature generator with controllable per-view class separability.
//!
//! Classes tagged `Local` come in confuser pairs that share their context
//! mean and sit `sep/2` either side of their own pair centre in the local
//! view; `Global` pairs are the mirror image. `Both` classes get distinct
//! means in both views. With `tissue_modulation`, each coordinate of each
//! view has its sign flipped in half of the tissues, so a view only
//! separates a pair once it is read together with the tissue.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureRecord, Taxonomy};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Separability {
    Local,
    Global,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub count: usize,
    pub separability: Separability,
    /// Partner sharing the uninformative-view mean. Defaults to the next
    /// unpaired class with the same tag.
    #[serde(default)]
    pub confuser: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: Vec<ClassSpec>,
    pub tissues: Vec<String>,
    pub d_local: usize,
    pub d_ctx: usize,
    pub local_separation: f64,
    pub ctx_separation: f64,
    pub tissue_shift: f64,
    pub noise: f64,
    #[serde(default)]
    pub tissue_modulation: bool,
    pub seed: u64,
}

impl SynthConfig {
    /// Eight classes, four separable in each view, spread over 64 tissues.
    pub fn complementary(per_class: usize, seed: u64) -> Self {
        let mk = |name: &str, s| ClassSpec {
            name: name.into(),
            count: per_class,
            separability: s,
            confuser: None,
        };
        use Separability::*;
        Self {
            classes: vec![
                mk("L0", Local),
                mk("L1", Local),
                mk("L2", Local),
                mk("L3", Local),
                mk("G0", Global),
                mk("G1", Global),
                mk("G2", Global),
                mk("G3", Global),
            ],
            tissues: (0..64).map(|t| format!("tissue_{t}")).collect(),
            d_local: 32,
            d_ctx: 32,
            local_separation: 4.0,
            ctx_separation: 4.0,
            tissue_shift: 0.0,
            noise: 1.0,
            tissue_modulation: true,
            seed,
        }
    }

    pub fn taxonomy(&self) -> Result<Taxonomy> {
        Taxonomy::new(
            self.classes.iter().map(|c| c.name.clone()).collect(),
            self.tissues.clone(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.taxonomy()?;
        if self.d_local == 0 || self.d_ctx == 0 {
            return Err(Error::config("feature widths must be positive"));
        }
        for (what, v) in [
            ("local_separation", self.local_separation),
            ("ctx_separation", self.ctx_separation),
            ("tissue_shift", self.tissue_shift),
            ("noise", self.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{what} must be finite and non-negative")));
            }
        }
        if let Some(c) = self.classes.iter().find(|c| c.count == 0) {
            return Err(Error::config(format!("class {} has count 0", c.name)));
        }
        self.pairs()?;
        Ok(())
    }

    /// Partner index for every `Local`/`Global` class.
    pub fn pairs(&self) -> Result<Vec<Option<usize>>> {
        let idx = |name: &str| {
            self.classes
                .iter()
                .position(|c| c.name == name)
                .ok_or_else(|| Error::config(format!("confuser {name:?} is not a class")))
        };
        let mut partner = vec![None; self.classes.len()];
        for (i, c) in self.classes.iter().enumerate() {
            if let Some(name) = &c.confuser {
                let j = idx(name)?;
                if j == i {
                    return Err(Error::config(format!("class {} is its own confuser", c.name)));
                }
                if c.separability == Separability::Both || self.classes[j].separability != c.separability {
                    return Err(Error::config(format!(
                        "confusers {} and {} must share a local or global tag",
                        c.name, name
                    )));
                }
                if partner[i].is_some_and(|p| p != j) || partner[j].is_some_and(|p| p != i) {
                    return Err(Error::config(format!("class {} is paired twice", c.name)));
                }
                partner[i] = Some(j);
                partner[j] = Some(i);
            }
        }
        for tag in [Separability::Local, Separability::Global] {
            let mut open = None;
            for (i, c) in self.classes.iter().enumerate() {
                if c.separability != tag || partner[i].is_some() {
                    continue;
                }
                match open.take() {
                    None => open = Some(i),
                    Some(j) => {
                        partner[i] = Some(j);
                        partner[j] = Some(i);
                    }
                }
            }
            if let Some(i) = open {
                return Err(Error::config(format!(
                    "class {} has no confuser",
                    self.classes[i].name
                )));
            }
        }
        Ok(partner)
    }
}

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn direction(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// Two points `sep/2` either side of a pair centre at distance `sep` from the origin.
fn pair_means(center: &[f64], axis: &[f64], sep: f64) -> (Vec<f64>, Vec<f64>) {
    let at = |s: f64| {
        center
            .iter()
            .zip(axis)
            .map(|(c, a)| sep * c + s * sep / 2.0 * a)
            .collect()
    };
    (at(-1.0), at(1.0))
}

/// Class means `(local, ctx)` before tissue effects.
fn class_means(
    cfg: &SynthConfig,
    partner: &[Option<usize>],
    rng: &mut impl Rng,
) -> Vec<(Vec<f64>, Vec<f64>)> {
    let c = cfg.classes.len();
    let mut means: Vec<Option<(Vec<f64>, Vec<f64>)>> = vec![None; c];
    for i in 0..c {
        if means[i].is_some() {
            continue;
        }
        let a = direction(rng, cfg.d_local);
        let b = direction(rng, cfg.d_ctx);
        match (cfg.classes[i].separability, partner[i]) {
            (Separability::Both, _) | (_, None) => {
                means[i] = Some((scaled(&a, cfg.local_separation), scaled(&b, cfg.ctx_separation)));
            }
            (Separability::Local, Some(j)) => {
                let shared = scaled(&b, cfg.ctx_separation);
                let (lo, hi) = pair_means(&a, &direction(rng, cfg.d_local), cfg.local_separation);
                means[i] = Some((lo, shared.clone()));
                means[j] = Some((hi, shared));
            }
            (Separability::Global, Some(j)) => {
                let shared = scaled(&a, cfg.local_separation);
                let (lo, hi) = pair_means(&b, &direction(rng, cfg.d_ctx), cfg.ctx_separation);
                means[i] = Some((shared.clone(), lo));
                means[j] = Some((shared, hi));
            }
        }
    }
    means
        .into_iter()
        .map(|m| m.expect("every class assigned"))
        .collect()
}

/// Per-tissue `±1` factors for every dimension of each view. Each dimension
/// is negated in half of the tissues, so its sign averages out over tissues.
fn tissue_signs(cfg: &SynthConfig, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let t = cfg.tissues.len();
    let mut view = |d: usize| {
        let mut out = vec![vec![1.0; d]; t];
        if cfg.tissue_modulation {
            for j in 0..d {
                let mut col: Vec<f64> = (0..t).map(|k| if k < t / 2 { -1.0 } else { 1.0 }).collect();
                col.shuffle(rng);
                for (row, v) in out.iter_mut().zip(col) {
                    row[j] = v;
                }
            }
        }
        out
    };
    let local = view(cfg.d_local);
    (local, view(cfg.d_ctx))
}

/// Deterministic in `cfg` (seed included).
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let partner = cfg.pairs()?;
    let mut rng = seed::stream(cfg.seed, "synth");
    let means = class_means(cfg, &partner, &mut rng);
    let shifts: Vec<(Vec<f64>, Vec<f64>)> = cfg
        .tissues
        .iter()
        .map(|_| {
            let l = (0..cfg.d_local)
                .map(|_| cfg.tissue_shift * gauss(&mut rng))
                .collect();
            let c = (0..cfg.d_ctx)
                .map(|_| cfg.tissue_shift * gauss(&mut rng))
                .collect();
            (l, c)
        })
        .collect();
    let signs = tissue_signs(cfg, &mut rng);

    let mut order: Vec<usize> = cfg
        .classes
        .iter()
        .enumerate()
        .flat_map(|(c, spec)| std::iter::repeat_n(c, spec.count))
        .collect();
    order.shuffle(&mut rng);

    let t = cfg.tissues.len();
    let mut ds = Dataset::new(cfg.taxonomy()?, cfg.d_local, cfg.d_ctx);
    ds.records.reserve(order.len());
    for (i, &c) in order.iter().enumerate() {
        let tissue = rng.random_range(0..t);
        let (ml, mc) = &means[c];
        let (sl, sc) = &shifts[tissue];
        let (pl, pc) = (&signs.0[tissue], &signs.1[tissue]);
        let mut draw = |m: &[f64], s: &[f64], sign: &[f64]| -> Vec<f64> {
            m.iter()
                .zip(s)
                .zip(sign)
                .map(|((&m, &s), &f)| f * m + s + cfg.noise * gauss(&mut rng))
                .collect()
        };
        let local = draw(ml, sl, pl);
        let ctx = draw(mc, sc, pc);
        ds.records.push(FeatureRecord {
            cell_id: format!("cell_{i:06}"),
            tissue,
            label: Some(c),
            local,
            ctx,
        });
    }
    Ok(ds)
}
