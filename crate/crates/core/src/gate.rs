//! Per-cell fusion gate: statistics, network, mixing, training objective and
//! the calibrated single-path deployment policy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Matrix, ProbVector, LN_EPS};
use crate::nn::{DropoutMasks, Linear, Mlp};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

pub const GATE_STORE: u32 = 3;
pub const NUM_STATS: usize = 8;
/// Floor applied inside every logarithm of a probability.
pub const LOG_FLOOR: f64 = 1e-12;

/// `[p_local_max, p_global_max, H̄_local, H̄_global, margin_local,
/// margin_global, ρ, |ρ|]` with `ρ = p_global_max − p_local_max`.
pub fn gate_stats(p_local: &ProbVector, p_global: &ProbVector) -> Result<[f64; NUM_STATS]> {
    if p_local.len() != p_global.len() {
        return Err(Error::dim(format!(
            "gate statistics over {} and {} classes",
            p_local.len(),
            p_global.len()
        )));
    }
    let rho = p_global.max() - p_local.max();
    Ok([
        p_local.max(),
        p_global.max(),
        math::normalized_entropy(p_local)?,
        math::normalized_entropy(p_global)?,
        math::margin(p_local),
        math::margin(p_global),
        rho,
        rho.abs(),
    ])
}

pub fn stats_matrix(p_local: &[ProbVector], p_global: &[ProbVector]) -> Result<Matrix> {
    let rows = p_local
        .iter()
        .zip(p_global)
        .map(|(a, b)| gate_stats(a, b).map(|r| r.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, NUM_STATS));
    }
    Matrix::from_rows(&rows)
}

/// `(1−g) p_local + g p_global`.
pub fn fuse(p_local: &ProbVector, p_global: &ProbVector, g: f64) -> Result<ProbVector> {
    if !(0.0..=1.0).contains(&g) {
        return Err(Error::invalid(format!("gate value {g} outside [0, 1]")));
    }
    if p_local.len() != p_global.len() {
        return Err(Error::dim("fusing distributions of different lengths"));
    }
    if g == 0.0 {
        return Ok(p_local.clone());
    }
    if g == 1.0 {
        return Ok(p_global.clone());
    }
    let v = p_local
        .as_slice()
        .iter()
        .zip(p_global.as_slice())
        .map(|(&l, &r)| ((1.0 - g) * l + g * r).min(1.0))
        .collect();
    Ok(ProbVector::new_unchecked(v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateNetConfig {
    /// Width of each LayerNorm + linear feature projection.
    pub proj: usize,
    /// Hidden widths of the MLP over `[proj_local; proj_global; r]`.
    pub hidden: Vec<usize>,
}

impl Default for GateNetConfig {
    fn default() -> Self {
        Self {
            proj: 128,
            hidden: vec![64],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateNet {
    pub store: ParamStore,
    pub proj_local: Linear,
    pub proj_global: Linear,
    pub mlp: Mlp,
    pub d_local: usize,
    pub d_global: usize,
}

impl GateNet {
    pub fn new(cfg: &GateNetConfig, d_local: usize, d_global: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new(GATE_STORE);
        let proj_local = Linear::new(
            &mut store,
            rng,
            "gate.proj_local",
            "gate",
            d_local,
            cfg.proj,
            true,
        );
        let proj_global = Linear::new(
            &mut store,
            rng,
            "gate.proj_global",
            "gate",
            d_global,
            cfg.proj,
            true,
        );
        let mut widths = vec![2 * cfg.proj + NUM_STATS];
        widths.extend(&cfg.hidden);
        widths.push(1);
        let mlp = Mlp::new(&mut store, rng, "gate.mlp", "gate", &widths);
        Self {
            store,
            proj_local,
            proj_global,
            mlp,
            d_local,
            d_global,
        }
    }

    /// Gate logit `a` (`B×1`); `g = σ(a)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_local: Var,
        s_global: Var,
        stats: Var,
        masks: Option<&DropoutMasks>,
    ) -> Var {
        let a = tape.layer_norm(f_local, LN_EPS);
        let a = self.proj_local.forward(tape, store, a);
        let b = tape.layer_norm(s_global, LN_EPS);
        let b = self.proj_global.forward(tape, store, b);
        let x = tape.concat_cols(a, b);
        let x = tape.concat_cols(x, stats);
        self.mlp.forward(tape, store, x, masks)
    }

    /// Gate values for a batch of precomputed expert outputs.
    pub fn predict(&self, f_local: &Matrix, s_global: &Matrix, stats: &Matrix) -> Result<Vec<f64>> {
        if f_local.cols() != self.d_local || s_global.cols() != self.d_global || stats.cols() != NUM_STATS {
            return Err(Error::dim("gate inputs do not match the gate network"));
        }
        let mut tape = Tape::new();
        let f = tape.constant(f_local.clone());
        let s = tape.constant(s_global.clone());
        let r = tape.constant(stats.clone());
        let a = self.forward(&mut tape, &self.store, f, s, r, None);
        let g: Vec<f64> = tape.value(a).data().iter().map(|&a| math::sigmoid(a)).collect();
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite gate output".into()));
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateLossConfig {
    /// Soft-target temperature κ.
    pub kappa: f64,
    pub lambda_conf: f64,
    pub lambda_delta: f64,
    pub gamma_delta: f64,
    pub lambda_align: f64,
    pub lambda_ent: f64,
    pub lambda_aux: f64,
}

impl Default for GateLossConfig {
    fn default() -> Self {
        Self {
            kappa: 5.0,
            lambda_conf: 2.0,
            lambda_delta: 1.0,
            gamma_delta: 1.0,
            lambda_align: 0.1,
            lambda_ent: 0.05,
            lambda_aux: 0.05,
        }
    }
}

impl GateLossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.kappa,
            self.lambda_conf,
            self.lambda_delta,
            self.gamma_delta,
            self.lambda_align,
            self.lambda_ent,
            self.lambda_aux,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config(
                "gate loss coefficients must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

/// Which of the four gate objective terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossMask {
    pub mix: bool,
    pub gate: bool,
    pub align: bool,
    pub ent: bool,
}

impl Default for LossMask {
    fn default() -> Self {
        Self {
            mix: true,
            gate: true,
            align: true,
            ent: true,
        }
    }
}

fn correct(p: &ProbVector, y: usize) -> bool {
    p.argmax() == y
}

/// Preferred gate value: 1 when only global is right, 0 when only local is
/// right, otherwise `σ(κ Δ)` with `Δ = p_global(y) − p_local(y)`.
pub fn soft_target(p_local: &ProbVector, p_global: &ProbVector, y: usize, kappa: f64) -> f64 {
    match (correct(p_local, y), correct(p_global, y)) {
        (false, true) => 1.0,
        (true, false) => 0.0,
        _ => math::sigmoid(kappa * (p_global.get(y) - p_local.get(y))),
    }
}

/// `1 + λ_conf·[exactly one path right] + λ_Δ |Δ|^{γ_Δ}`.
pub fn conflict_weight(p_local: &ProbVector, p_global: &ProbVector, y: usize, cfg: &GateLossConfig) -> f64 {
    let xor = correct(p_local, y) != correct(p_global, y);
    let delta = (p_global.get(y) - p_local.get(y)).abs();
    1.0 + if xor { cfg.lambda_conf } else { 0.0 } + cfg.lambda_delta * delta.powf(cfg.gamma_delta)
}

/// `clamp((#{g̃<0.5}+1)/(#{g̃≥0.5}+1), 0.1, 10)`.
pub fn adaptive_pos_weight(targets: &[f64]) -> f64 {
    let pos = targets.iter().filter(|&&t| t >= 0.5).count();
    let neg = targets.len() - pos;
    ((neg as f64 + 1.0) / (pos as f64 + 1.0)).clamp(0.1, 10.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateLossTerms {
    pub mix: f64,
    pub gate: f64,
    pub align: f64,
    pub ent: f64,
    pub aux: f64,
    pub total: f64,
    /// Samples whose fused true-class probability hit the log floor.
    pub clamped: usize,
}

/// Ground-truth-derived quantities for a batch, all treated as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTargets {
    pub target: Vec<f64>,
    pub weight: Vec<f64>,
    pub delta: Vec<f64>,
    pub pos_weight: f64,
    /// Row `i` is `p_global` if `target[i] > 0.5` else `p_local`.
    pub align_to: Matrix,
}

impl GateTargets {
    pub fn new(
        p_local: &[ProbVector],
        p_global: &[ProbVector],
        labels: &[usize],
        cfg: &GateLossConfig,
    ) -> Result<Self> {
        if p_local.len() != labels.len() || p_global.len() != labels.len() {
            return Err(Error::dim("gate targets need one distribution pair per label"));
        }
        if labels.is_empty() {
            return Err(Error::invalid("empty gate batch"));
        }
        let c = p_local[0].len();
        let mut target = Vec::with_capacity(labels.len());
        let mut weight = Vec::with_capacity(labels.len());
        let mut delta = Vec::with_capacity(labels.len());
        let mut align = Vec::with_capacity(labels.len() * c);
        for ((pl, pg), &y) in p_local.iter().zip(p_global).zip(labels) {
            let t = soft_target(pl, pg, y, cfg.kappa);
            target.push(t);
            weight.push(conflict_weight(pl, pg, y, cfg));
            delta.push(pg.get(y) - pl.get(y));
            align.extend_from_slice(if t > 0.5 { pg.as_slice() } else { pl.as_slice() });
        }
        Ok(Self {
            pos_weight: adaptive_pos_weight(&target),
            align_to: Matrix::from_vec(labels.len(), c, align)?,
            target,
            weight,
            delta,
        })
    }
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.max(LOG_FLOOR).ln()
    }
}

/// The gate objective evaluated directly from gate values, with every log
/// floored at [`LOG_FLOOR`] and `0·log 0 = 0`. Used for diagnostics and as a
/// reference for the tape version.
pub fn gate_losses_reference(
    p_local: &[ProbVector],
    p_global: &[ProbVector],
    g: &[f64],
    labels: &[usize],
    cfg: &GateLossConfig,
    mask: LossMask,
) -> Result<GateLossTerms> {
    let t = GateTargets::new(p_local, p_global, labels, cfg)?;
    let n = labels.len() as f64;
    let mut terms = GateLossTerms::default();
    for i in 0..labels.len() {
        let mix = fuse(&p_local[i], &p_global[i], g[i])?;
        let w = t.weight[i];
        let py = mix.get(labels[i]);
        if py < LOG_FLOOR {
            terms.clamped += 1;
        }
        terms.mix -= w * py.max(LOG_FLOOR).ln() / n;
        let tg = t.target[i];
        let bce = -(t.pos_weight * xlogy(tg, g[i]) + xlogy(1.0 - tg, 1.0 - g[i]));
        terms.gate += w * bce / n;
        let kl: f64 = t
            .align_to
            .row(i)
            .iter()
            .zip(mix.as_slice())
            .map(|(&p, &q)| xlogy(p, p) - xlogy(p, q))
            .sum();
        terms.align += w * kl / n;
        terms.ent += cfg.lambda_ent * t.delta[i].abs() * math::bernoulli_entropy(g[i]) / n;
    }
    terms.total = masked_total(&terms, cfg, mask);
    Ok(terms)
}

fn masked_total(t: &GateLossTerms, cfg: &GateLossConfig, mask: LossMask) -> f64 {
    let on = |b: bool, v: f64| if b { v } else { 0.0 };
    on(mask.mix, t.mix)
        + on(mask.gate, t.gate)
        + on(mask.align, cfg.lambda_align * t.align)
        + on(mask.ent, t.ent)
        + cfg.lambda_aux * t.aux
}

/// Builds the gate objective on the tape from the gate logit `a` (`B×1`) and
/// the expert distributions (`B×C`, constants or trainable). `aux`, when
/// given, is added with weight `λ_aux`.
#[allow(clippy::too_many_arguments)]
pub fn gate_losses(
    tape: &mut Tape,
    logit: Var,
    p_local: Var,
    p_global: Var,
    labels: &[usize],
    targets: &GateTargets,
    cfg: &GateLossConfig,
    mask: LossMask,
    aux: Option<Var>,
) -> Result<(Var, GateLossTerms)> {
    let b = labels.len();
    if tape.value(logit).shape() != (b, 1) {
        return Err(Error::dim("gate logit must be a B×1 column"));
    }
    let col = |tape: &mut Tape, v: Vec<f64>| tape.constant(Matrix::column(&v));
    let w = col(tape, targets.weight.clone());

    let g = tape.sigmoid(logit);
    let one_minus_g = tape.one_minus(g);
    let from_local = tape.mul_col(p_local, one_minus_g);
    let from_global = tape.mul_col(p_global, g);
    let mix = tape.add(from_local, from_global);

    // Fused NLL.
    let py = tape.pick_cols(mix, labels);
    let clamped = tape.value(py).data().iter().filter(|&&v| v < LOG_FLOOR).count();
    let log_py = tape.ln_floor(py, LOG_FLOOR);
    let wl = tape.mul(log_py, w);
    let l_mix = tape.mean(wl);
    let l_mix = tape.scale(l_mix, -1.0);

    // Weighted BCE from the logit: −log g = softplus(−a), −log(1−g) = softplus(a).
    let neg_a = tape.scale(logit, -1.0);
    let sp_neg = tape.softplus(neg_a);
    let sp_pos = tape.softplus(logit);
    let pos_coef = col(
        tape,
        targets.target.iter().map(|t| targets.pos_weight * t).collect(),
    );
    let neg_coef = col(tape, targets.target.iter().map(|t| 1.0 - t).collect());
    let pos_term = tape.mul(sp_neg, pos_coef);
    let neg_term = tape.mul(sp_pos, neg_coef);
    let bce = tape.add(pos_term, neg_term);
    let wb = tape.mul(bce, w);
    let l_gate = tape.mean(wb);

    // KL(p* ‖ p_mix) with p* constant.
    let p_star = tape.constant(targets.align_to.clone());
    let self_info: Vec<f64> = (0..b)
        .map(|i| targets.align_to.row(i).iter().map(|&p| xlogy(p, p)).sum())
        .collect();
    let self_info = col(tape, self_info);
    let log_mix = tape.ln_floor(mix, LOG_FLOOR);
    let cross = tape.mul(log_mix, p_star);
    let cross = tape.sum_cols(cross);
    let kl = tape.sub(self_info, cross);
    let wk = tape.mul(kl, w);
    let l_align = tape.mean(wk);

    // Gate entropy scaled by λ_ent |Δ|.
    let h_pos = tape.mul(g, sp_neg);
    let h_neg = tape.mul(one_minus_g, sp_pos);
    let h = tape.add(h_pos, h_neg);
    let ent_coef = col(
        tape,
        targets.delta.iter().map(|d| cfg.lambda_ent * d.abs()).collect(),
    );
    let he = tape.mul(h, ent_coef);
    let l_ent = tape.mean(he);

    let mut total: Option<Var> = None;
    let mut add = |tape: &mut Tape, on: bool, v: Var, k: f64| {
        if !on {
            return;
        }
        let v = if k == 1.0 { v } else { tape.scale(v, k) };
        total = Some(match total {
            None => v,
            Some(t) => tape.add(t, v),
        });
    };
    add(tape, mask.mix, l_mix, 1.0);
    add(tape, mask.gate, l_gate, 1.0);
    add(tape, mask.align, l_align, cfg.lambda_align);
    add(tape, mask.ent, l_ent, 1.0);
    if let Some(aux) = aux {
        add(tape, true, aux, cfg.lambda_aux);
    }
    let total = match total {
        Some(t) => t,
        None => return Err(Error::config("every gate loss term is disabled")),
    };

    let terms = GateLossTerms {
        mix: tape.scalar(l_mix),
        gate: tape.scalar(l_gate),
        align: tape.scalar(l_align),
        ent: tape.scalar(l_ent),
        aux: aux.map_or(0.0, |a| tape.scalar(a)),
        total: tape.scalar(total),
        clamped,
    };
    Ok((total, terms))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Path {
    Local,
    Global,
}

/// Validation accuracy of each path, grouped by the class it predicts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    pub local: Vec<f64>,
    pub global: Vec<f64>,
}

impl Reliability {
    pub fn of(&self, path: Path, c: usize) -> f64 {
        match path {
            Path::Local => self.local[c],
            Path::Global => self.global[c],
        }
    }
}

/// Per-class precision of one path's argmax; unpredicted classes get 0.5.
pub fn path_reliability(probs: &[ProbVector], labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    if probs.is_empty() {
        return Err(Error::invalid("reliability needs a non-empty validation set"));
    }
    if probs.len() != labels.len() {
        return Err(Error::dim("one prediction per label is required"));
    }
    let mut hit = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (p, &y) in probs.iter().zip(labels) {
        let k = p.argmax();
        seen[k] += 1;
        if k == y {
            hit[k] += 1;
        }
    }
    Ok(hit
        .iter()
        .zip(&seen)
        .map(|(&h, &s)| if s == 0 { 0.5 } else { h as f64 / s as f64 })
        .collect())
}

pub fn reliability(
    p_local: &[ProbVector],
    p_global: &[ProbVector],
    labels: &[usize],
    classes: usize,
) -> Result<Reliability> {
    Ok(Reliability {
        local: path_reliability(p_local, labels, classes)?,
        global: path_reliability(p_global, labels, classes)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tau: f64,
    pub gamma_gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SafeDecision {
    pub path: Path,
    /// Whether the gate's choice overrode the reliability chooser.
    pub gate_accepted: bool,
    pub baseline: Path,
    pub dist: ProbVector,
}

/// Path with the larger `p_max × reliability`; ties go to local.
pub fn baseline_choice(p_local: &ProbVector, p_global: &ProbVector, rel: &Reliability) -> Path {
    let score = |p: &ProbVector, path| p.max() * rel.of(path, p.argmax());
    if score(p_global, Path::Global) > score(p_local, Path::Local) {
        Path::Global
    } else {
        Path::Local
    }
}

pub fn safe_decide(
    p_local: &ProbVector,
    p_global: &ProbVector,
    g: f64,
    rel: &Reliability,
    th: Thresholds,
) -> SafeDecision {
    let baseline = baseline_choice(p_local, p_global, rel);
    let rho = p_global.max() - p_local.max();
    let gate_accepted = g > th.tau && rho.abs() > th.gamma_gap;
    let path = if gate_accepted {
        if g > 0.5 {
            Path::Global
        } else {
            Path::Local
        }
    } else {
        baseline
    };
    let dist = match path {
        Path::Local => p_local.clone(),
        Path::Global => p_global.clone(),
    };
    SafeDecision {
        path,
        gate_accepted,
        baseline,
        dist,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSearch {
    pub thresholds: Thresholds,
    pub accuracy: f64,
    pub best_single: f64,
    /// False when no grid point reached the best single path; the most
    /// accurate point is returned anyway.
    pub meets_floor: bool,
}

pub fn tau_grid() -> Vec<f64> {
    (0..=8).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub fn gap_grid() -> Vec<f64> {
    (0..=6).map(|i| (5 * i) as f64 / 100.0).collect()
}

fn accuracy_of(preds: impl Iterator<Item = usize>, labels: &[usize]) -> f64 {
    let hits = preds.zip(labels).filter(|(p, y)| p == *y).count();
    hits as f64 / labels.len() as f64
}

/// Grid search over `(τ, γ_gap)` maximizing validation accuracy subject to
/// matching the best single path; ties go to larger thresholds.
pub fn calibrate_thresholds(
    p_local: &[ProbVector],
    p_global: &[ProbVector],
    g: &[f64],
    labels: &[usize],
    rel: &Reliability,
) -> Result<ThresholdSearch> {
    if labels.is_empty() {
        return Err(Error::invalid(
            "threshold search needs a non-empty validation set",
        ));
    }
    if p_local.len() != labels.len() || p_global.len() != labels.len() || g.len() != labels.len() {
        return Err(Error::dim("threshold search inputs differ in length"));
    }
    let best_single = accuracy_of(p_local.iter().map(|p| p.argmax()), labels)
        .max(accuracy_of(p_global.iter().map(|p| p.argmax()), labels));
    let mut best: Option<(f64, Thresholds)> = None;
    let mut best_meeting: Option<(f64, Thresholds)> = None;
    // Ascending grid with `>=` keeps the largest thresholds among ties.
    for &tau in &tau_grid() {
        for &gamma_gap in &gap_grid() {
            let th = Thresholds { tau, gamma_gap };
            let acc = accuracy_of(
                (0..labels.len()).map(|i| {
                    safe_decide(&p_local[i], &p_global[i], g[i], rel, th)
                        .dist
                        .argmax()
                }),
                labels,
            );
            if best.is_none_or(|(a, _)| acc >= a) {
                best = Some((acc, th));
            }
            if acc >= best_single && best_meeting.is_none_or(|(a, _)| acc >= a) {
                best_meeting = Some((acc, th));
            }
        }
    }
    let (meets_floor, (accuracy, thresholds)) = match best_meeting {
        Some(b) => (true, b),
        None => (false, best.expect("grid is non-empty")),
    };
    Ok(ThresholdSearch {
        thresholds,
        accuracy,
        best_single,
        meets_floor,
    })
}
