//! The two expert classifiers and their objectives.
//!
//! The local expert reads the nucleus-scale feature through a tissue FiLM and
//! an MLP head. The global expert layer-normalizes and projects the local
//! feature and a FiLM-modulated context feature into equal-width streams,
//! concatenates them (context scaled by α) and classifies with its own head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Matrix, ProbVector, LN_EPS};
use crate::nn::{DropoutMasks, FilmAdaptor, Linear, Mlp};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const LOCAL_STORE: u32 = 1;
pub const GLOBAL_STORE: u32 = 2;

/// Layer widths shared by both experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertDims {
    pub tissue_embed: usize,
    pub film_hidden: usize,
    pub head_hidden: usize,
    /// Width of each projected stream in the global expert.
    pub proj: usize,
}

impl Default for ExpertDims {
    fn default() -> Self {
        Self {
            tissue_embed: 64,
            film_hidden: 128,
            head_hidden: 256,
            proj: 512,
        }
    }
}

/// Logits, probabilities and the pre-head feature for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertOutput {
    pub logits: Matrix,
    pub probs: Vec<ProbVector>,
    pub features: Matrix,
}

fn output(logits: Matrix, features: Matrix) -> Result<ExpertOutput> {
    if !logits.is_finite() {
        return Err(Error::Numerical("non-finite expert logits".into()));
    }
    let probs = (0..logits.rows())
        .map(|r| math::softmax(logits.row(r)))
        .collect::<Result<_>>()?;
    Ok(ExpertOutput {
        logits,
        probs,
        features,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalExpert {
    pub store: ParamStore,
    pub film: FilmAdaptor,
    pub head: Mlp,
    pub d_local: usize,
    pub classes: usize,
}

impl LocalExpert {
    pub fn new(
        dims: &ExpertDims,
        d_local: usize,
        classes: usize,
        tissues: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut store = ParamStore::new(LOCAL_STORE);
        let film = FilmAdaptor::new(
            &mut store,
            rng,
            "local.film",
            tissues,
            dims.tissue_embed,
            dims.film_hidden,
            d_local,
        );
        let head = Mlp::new(
            &mut store,
            rng,
            "local.head",
            "head",
            &[d_local, dims.head_hidden, classes],
        );
        Self {
            store,
            film,
            head,
            d_local,
            classes,
        }
    }

    /// `(f_local, logits)` with parameters read from `store`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        local: Var,
        tissues: &[usize],
        masks: Option<&DropoutMasks>,
    ) -> (Var, Var) {
        let f = self.film.modulate(tape, store, local, tissues);
        let z = self.head.forward(tape, store, f, masks);
        (f, z)
    }

    pub fn predict(&self, local: &Matrix, tissues: &[usize]) -> Result<ExpertOutput> {
        check_input("local", local, self.d_local, tissues.len())?;
        let mut tape = Tape::new();
        let x = tape.constant(local.clone());
        let (f, z) = self.forward(&mut tape, &self.store, x, tissues, None);
        output(tape.value(z).clone(), tape.value(f).clone())
    }
}

/// Class distributions from an expert head applied to precomputed features.
pub fn head_probs(head: &Mlp, store: &ParamStore, features: &Matrix) -> Result<Vec<ProbVector>> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let z = head.forward(&mut tape, store, x, None);
    let z = tape.value(z);
    if !z.is_finite() {
        return Err(Error::Numerical("non-finite head logits".into()));
    }
    (0..z.rows()).map(|r| math::softmax(z.row(r))).collect()
}

fn check_input(what: &str, m: &Matrix, d: usize, rows: usize) -> Result<()> {
    if m.cols() != d || m.rows() != rows {
        return Err(Error::dim(format!(
            "{what} input is {}x{}, expected {rows}x{d}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalExpert {
    pub store: ParamStore,
    pub film_ctx: FilmAdaptor,
    /// Morphology-stream projection `W_u` (group `morph`).
    pub w_u: Linear,
    pub w_v: Linear,
    pub head: Mlp,
    pub d_local: usize,
    pub d_ctx: usize,
    pub classes: usize,
}

/// Per-call switches of the global forward pass.
#[derive(Clone, Copy, Debug)]
pub struct GlobalMode<'a> {
    /// Weight on the context stream.
    pub alpha: f64,
    /// Per-row flag: zero that row's projected context stream.
    pub drop_context: Option<&'a [bool]>,
}

impl Default for GlobalMode<'_> {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            drop_context: None,
        }
    }
}

impl GlobalExpert {
    pub fn new(
        dims: &ExpertDims,
        d_local: usize,
        d_ctx: usize,
        classes: usize,
        tissues: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut store = ParamStore::new(GLOBAL_STORE);
        let film_ctx = FilmAdaptor::new(
            &mut store,
            rng,
            "global.film_ctx",
            tissues,
            dims.tissue_embed,
            dims.film_hidden,
            d_ctx,
        );
        let w_u = Linear::new(&mut store, rng, "global.w_u", "morph", d_local, dims.proj, false);
        let w_v = Linear::new(&mut store, rng, "global.w_v", "proj", d_ctx, dims.proj, false);
        let head = Mlp::new(
            &mut store,
            rng,
            "global.head",
            "head",
            &[2 * dims.proj, dims.head_hidden, classes],
        );
        Self {
            store,
            film_ctx,
            w_u,
            w_v,
            head,
            d_local,
            d_ctx,
            classes,
        }
    }

    /// `(s, logits)`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        local: Var,
        ctx: Var,
        tissues: &[usize],
        mode: GlobalMode,
        masks: Option<&DropoutMasks>,
    ) -> (Var, Var) {
        let v_tilde = self.film_ctx.modulate(tape, store, ctx, tissues);
        let u_n = tape.layer_norm(local, LN_EPS);
        let u = self.w_u.forward(tape, store, u_n);
        let v_n = tape.layer_norm(v_tilde, LN_EPS);
        let mut v = self.w_v.forward(tape, store, v_n);
        if let Some(drop) = mode.drop_context {
            let keep: Vec<f64> = drop.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
            let keep = tape.constant(Matrix::column(&keep));
            v = tape.mul_col(v, keep);
        }
        let v = tape.scale(v, mode.alpha);
        let s = tape.concat_cols(u, v);
        let z = self.head.forward(tape, store, s, masks);
        (s, z)
    }

    pub fn predict(&self, local: &Matrix, ctx: &Matrix, tissues: &[usize]) -> Result<ExpertOutput> {
        check_input("local", local, self.d_local, tissues.len())?;
        check_input("ctx", ctx, self.d_ctx, tissues.len())?;
        let mut tape = Tape::new();
        let x = tape.constant(local.clone());
        let c = tape.constant(ctx.clone());
        let (s, z) = self.forward(&mut tape, &self.store, x, c, tissues, GlobalMode::default(), None);
        output(tape.value(z).clone(), tape.value(s).clone())
    }
}

/// Context-stream weight after `epochs` of training: linear from `alpha0` to 1.
pub fn alpha_at(epochs: f64, alpha0: f64, ramp_epochs: f64) -> f64 {
    if ramp_epochs <= 0.0 {
        return 1.0;
    }
    alpha0 + (1.0 - alpha0) * (epochs / ramp_epochs).clamp(0.0, 1.0)
}

/// Per-row context-drop flags with probability `rate`.
pub fn context_drop(rng: &mut impl Rng, rows: usize, rate: f64) -> Vec<bool> {
    (0..rows)
        .map(|_| rate > 0.0 && rng.random::<f64>() < rate)
        .collect()
}

/// Per-class loss weights normalized to mean 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform(c: usize) -> Self {
        ClassWeights(vec![1.0; c])
    }

    pub fn get(&self, c: usize) -> f64 {
        self.0[c]
    }
}

/// `w_c ∝ (1−β)/(1−β^{n_c})`, normalized to mean 1.
pub fn effective_number_weights(counts: &[usize], beta: f64) -> Result<ClassWeights> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::config(format!(
            "effective-number beta {beta} outside [0, 1)"
        )));
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!(
            "class {c} has no samples; its weight is undefined"
        )));
    }
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| {
            // 1 − β^n via expm1 keeps precision when β is close to 1.
            let one_minus_pow = -(n as f64 * beta.ln()).exp_m1();
            if beta == 0.0 {
                1.0
            } else {
                (1.0 - beta) / one_minus_pow
            }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(ClassWeights(raw.into_iter().map(|w| w / mean).collect()))
}

/// `1−ε` on `y`, `ε/(C−1)` elsewhere.
pub fn smoothed_targets(y: usize, c: usize, eps: f64) -> Result<ProbVector> {
    if c < 2 {
        return Err(Error::dim("label smoothing needs at least two classes"));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::config(format!("label smoothing {eps} outside [0, 1)")));
    }
    if y >= c {
        return Err(Error::invalid(format!("label {y} out of range for {c} classes")));
    }
    let off = eps / (c - 1) as f64;
    let mut q = vec![off; c];
    q[y] = 1.0 - eps;
    Ok(ProbVector::new_unchecked(q))
}

/// `−w_y Σ_c q_c log softmax(z)_c` for one sample.
pub fn class_balanced_ce(z: &[f64], y: usize, weights: &ClassWeights, eps: f64) -> Result<f64> {
    let q = smoothed_targets(y, z.len(), eps)?;
    let logp = math::log_softmax(z)?;
    let s: f64 = q.as_slice().iter().zip(&logp).map(|(q, l)| q * l).sum();
    Ok(-weights.get(y) * s)
}

/// `B×1` column of per-sample class-balanced smoothed cross-entropies.
pub fn ce_terms(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    weights: &ClassWeights,
    eps: f64,
) -> Result<Var> {
    let c = tape.value(logits).cols();
    let mut rows = Vec::with_capacity(labels.len() * c);
    for &y in labels {
        let q = smoothed_targets(y, c, eps)?;
        let w = weights.get(y);
        rows.extend(q.as_slice().iter().map(|v| -w * v));
    }
    let target = tape.constant(Matrix::from_vec(labels.len(), c, rows)?);
    let logp = tape.log_softmax(logits);
    let prod = tape.mul(logp, target);
    Ok(tape.sum_cols(prod))
}

/// `(1 − p_local(y))^γ`.
pub fn local_aware_weight(p_local_y: f64, gamma: f64) -> f64 {
    (1.0 - p_local_y).clamp(0.0, 1.0).powf(gamma)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalLossTerms {
    pub main: f64,
    pub stable: f64,
    pub total: f64,
}

/// `mean(w_i ℓ_i) + λ_stable · mean(ℓ_i)` on the tape. `p_local_y` is the
/// frozen local expert's probability of the true class.
#[allow(clippy::too_many_arguments)]
pub fn global_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    p_local_y: &[f64],
    weights: &ClassWeights,
    eps: f64,
    gamma_focal: f64,
    lambda_stable: f64,
) -> Result<(Var, GlobalLossTerms)> {
    if p_local_y.len() != labels.len() {
        return Err(Error::dim("one local probability per label is required"));
    }
    let ell = ce_terms(tape, logits, labels, weights, eps)?;
    let w: Vec<f64> = p_local_y
        .iter()
        .map(|&p| local_aware_weight(p, gamma_focal))
        .collect();
    let w = tape.constant(Matrix::column(&w));
    let weighted = tape.mul(ell, w);
    let main = tape.mean(weighted);
    let stable = tape.mean(ell);
    let scaled = tape.scale(stable, lambda_stable);
    let total = tape.add(main, scaled);
    let terms = GlobalLossTerms {
        main: tape.scalar(main),
        stable: tape.scalar(stable),
        total: tape.scalar(total),
    };
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::seed;

    fn small_dims() -> ExpertDims {
        ExpertDims {
            tissue_embed: 4,
            film_hidden: 6,
            head_hidden: 7,
            proj: 5,
        }
    }

    fn random(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        crate::params::standard_normal(rng, r, c)
    }

    #[test]
    fn film_starts_as_layer_norm() {
        let mut rng = seed::stream(1, "t");
        let e = LocalExpert::new(&small_dims(), 8, 5, 3, &mut rng);
        let x = random(&mut rng, 4, 8);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = e.film.modulate(&mut tape, &e.store, xv, &[0, 1, 2, 1]);
        for r in 0..4 {
            assert_eq!(
                tape.value(f).row(r),
                math::layer_norm(x.row(r), LN_EPS).as_slice()
            );
        }
    }

    #[test]
    fn film_gamma_minus_one_annihilates() {
        let mut rng = seed::stream(2, "t");
        let mut e = LocalExpert::new(&small_dims(), 3, 2, 1, &mut rng);
        let b = e.film.out.bias.unwrap();
        let mut bias = Matrix::zeros(1, 6);
        for k in 0..3 {
            bias.set(0, k, -1.0);
        }
        *e.store.value_mut(b) = bias;
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::row_vector(&[1.0, -2.0, 0.5]));
        let f = e.film.modulate(&mut tape, &e.store, x, &[0]);
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_head_gives_uniform() {
        let mut rng = seed::stream(3, "t");
        let mut e = LocalExpert::new(&small_dims(), 8, 5, 2, &mut rng);
        let last = e.head.layers.last().unwrap().weight;
        let shape = e.store.value(last).shape();
        *e.store.value_mut(last) = Matrix::zeros(shape.0, shape.1);
        let out = e.predict(&random(&mut rng, 3, 8), &[0, 1, 0]).unwrap();
        for p in &out.probs {
            for &v in p.as_slice() {
                assert!((v - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn predict_rejects_wrong_width() {
        let mut rng = seed::stream(4, "t");
        let e = LocalExpert::new(&small_dims(), 8, 5, 2, &mut rng);
        assert!(matches!(
            e.predict(&Matrix::zeros(2, 7), &[0, 0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn weights_examples() {
        let ones = |w: ClassWeights| w.0.iter().all(|v| (v - 1.0).abs() < 1e-15);
        assert!(ones(effective_number_weights(&[5, 5, 5], 0.9999).unwrap()));
        assert!(ones(effective_number_weights(&[1, 7, 300], 0.0).unwrap()));
        assert!(effective_number_weights(&[3, 0], 0.9).is_err());
        let w = effective_number_weights(&[10, 1000], 0.9999).unwrap();
        // (1−β^1000)/(1−β^10) from a 30-digit evaluation, rounded to f64.
        let want = 95.209_939_491_031_14;
        assert!(((w.get(0) / w.get(1)) - want).abs() / want < 1e-12);
        assert!((w.0.iter().sum::<f64>() / 2.0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn smoothing_examples() {
        assert_eq!(
            smoothed_targets(2, 4, 0.0).unwrap().as_slice(),
            &[0.0, 0.0, 1.0, 0.0]
        );
        let q = smoothed_targets(0, 4, 0.1).unwrap();
        assert!((q.get(0) - 0.9).abs() < 1e-15);
        assert!((q.get(1) - 0.1 / 3.0).abs() < 1e-15);
        assert!((q.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(smoothed_targets(0, 1, 0.1).is_err());
    }

    #[test]
    fn ce_examples() {
        let w = ClassWeights::uniform(4);
        let l = class_balanced_ce(&[0.0; 4], 1, &w, 0.0).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let l = class_balanced_ce(&[0.0, 60.0, 0.0, 0.0], 1, &w, 0.0).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn ce_terms_match_scalar_version() {
        let mut rng = seed::stream(5, "t");
        let z = random(&mut rng, 6, 5);
        let labels = [0, 4, 2, 2, 1, 3];
        let w = effective_number_weights(&[3, 9, 1, 4, 20], 0.9).unwrap();
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let col = ce_terms(&mut tape, zv, &labels, &w, 0.1).unwrap();
        for (r, &y) in labels.iter().enumerate() {
            let want = class_balanced_ce(z.row(r), y, &w, 0.1).unwrap();
            assert!((tape.value(col).get(r, 0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn local_aware_examples() {
        assert_eq!(local_aware_weight(1.0, 2.0), 0.0);
        assert_eq!(local_aware_weight(0.0, 2.0), 1.0);
        assert_eq!(local_aware_weight(0.5, 2.0), 0.25);
    }

    #[test]
    fn confident_local_leaves_only_stable_term() {
        let mut rng = seed::stream(6, "t");
        let z = random(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let w = ClassWeights::uniform(4);
        let (_, t) = global_loss(&mut tape, zv, &[0, 1, 2], &[1.0; 3], &w, 0.1, 2.0, 0.3).unwrap();
        assert_eq!(t.main, 0.0);
        assert!((t.total - 0.3 * t.stable).abs() < 1e-15);
    }

    #[test]
    fn dropped_context_equals_zero_alpha() {
        let mut rng = seed::stream(7, "t");
        let g = GlobalExpert::new(&small_dims(), 6, 5, 4, 2, &mut rng);
        let x = random(&mut rng, 3, 6);
        let c = random(&mut rng, 3, 5);
        let t = [0, 1, 1];
        let run = |mode: GlobalMode| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let cv = tape.constant(c.clone());
            let (_, z) = g.forward(&mut tape, &g.store, xv, cv, &t, mode, None);
            tape.value(z).clone()
        };
        let dropped = run(GlobalMode {
            alpha: 0.7,
            drop_context: Some(&[true; 3]),
        });
        let zero_alpha = run(GlobalMode {
            alpha: 0.0,
            drop_context: None,
        });
        assert_eq!(dropped, zero_alpha);
        assert_ne!(dropped, run(GlobalMode::default()));
    }

    #[test]
    fn local_loss_gradient() {
        let mut rng = seed::stream(8, "t");
        let e = LocalExpert::new(&small_dims(), 8, 5, 3, &mut rng);
        let x = random(&mut rng, 4, 8);
        let labels = [0, 3, 4, 1];
        let tissues = [0, 2, 1, 2];
        let w = effective_number_weights(&[2, 5, 1, 3, 4], 0.99).unwrap();
        let f = |t: &mut Tape, s: &[ParamStore]| {
            let xv = t.constant(x.clone());
            let (_, z) = e.forward(t, &s[0], xv, &tissues, None);
            let ell = ce_terms(t, z, &labels, &w, 0.1)?;
            Ok(t.mean(ell))
        };
        let r = grad_check(std::slice::from_ref(&e.store), f, 1e-5).unwrap();
        assert!(r.passed(1e-4) || r.kink_margin < 1e-3, "{r:?}");
    }

    #[test]
    fn alpha_ramp() {
        assert_eq!(alpha_at(0.0, 0.25, 2.0), 0.25);
        assert_eq!(alpha_at(1.0, 0.25, 2.0), 0.625);
        assert_eq!(alpha_at(5.0, 0.25, 2.0), 1.0);
    }

    #[test]
    fn context_drop_extremes() {
        let mut rng = seed::stream(9, "t");
        assert!(context_drop(&mut rng, 100, 0.0).iter().all(|d| !d));
        assert!(context_drop(&mut rng, 100, 1.0).iter().all(|&d| d));
    }
}
