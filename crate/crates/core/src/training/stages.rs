use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{run_stage, OptimizerState, Stage, StageModel, StageOutcome, StagePlan, StepCtx};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::experts::{
    alpha_at, ce_terms, context_drop, effective_number_weights, global_loss, head_probs, ClassWeights,
    ExpertOutput, GlobalExpert, GlobalMode, LocalExpert, GLOBAL_STORE, LOCAL_STORE,
};
use crate::gate::{
    fuse, gate_losses, stats_matrix, GateLossConfig, GateNet, GateTargets, LossMask, GATE_STORE,
};
use crate::math::{Matrix, ProbVector};
use crate::metrics::{f1_scores, ConfusionMatrix};
use crate::nn::{DropoutMasks, Mlp};
use crate::params::ParamStore;
use crate::seed;
use crate::tape::{Tape, Var};

/// Dense, labelled view of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub local: Matrix,
    pub ctx: Matrix,
    pub tissues: Vec<usize>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Split {
    pub fn from_dataset(ds: &Dataset, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            local: ds.local_matrix(idx),
            ctx: ds.ctx_matrix(idx),
            tissues: ds.tissues(idx),
            labels: ds.labels(idx)?,
            classes: ds.taxonomy.num_classes(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    fn batch_tissues(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.tissues[i]).collect()
    }

    fn batch_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertLoss {
    pub label_smoothing: f64,
    pub en_beta: f64,
}

impl Default for ExpertLoss {
    fn default() -> Self {
        Self {
            label_smoothing: 0.1,
            en_beta: 0.9999,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalStageOptions {
    pub alpha0: f64,
    pub alpha_ramp_epochs: f64,
    pub context_dropout: f64,
    pub gamma_focal: f64,
    pub lambda_stable: f64,
}

impl Default for GlobalStageOptions {
    fn default() -> Self {
        Self {
            alpha0: 0.25,
            alpha_ramp_epochs: 2.0,
            context_dropout: 0.1,
            gamma_focal: 2.0,
            lambda_stable: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateStageOptions {
    pub loss: GateLossConfig,
    pub mask: LossMask,
    /// Gate-only epochs before heads may be unfrozen.
    pub warmup_epochs: f64,
    pub unfreeze_heads: bool,
    /// Re-initialize both expert heads and train them from the first step.
    pub reinit_heads: bool,
    pub head_dropout: f64,
}

impl Default for GateStageOptions {
    fn default() -> Self {
        Self {
            loss: GateLossConfig::default(),
            mask: LossMask::default(),
            warmup_epochs: 0.5,
            unfreeze_heads: false,
            reinit_heads: false,
            head_dropout: 0.2,
        }
    }
}

fn class_weights(train: &Split, loss: &ExpertLoss) -> Result<ClassWeights> {
    effective_number_weights(&train.class_counts(), loss.en_beta)
}

fn macro_f1(classes: usize, labels: &[usize], probs: &[ProbVector]) -> Result<f64> {
    let pred: Vec<usize> = probs.iter().map(ProbVector::argmax).collect();
    Ok(f1_scores(&ConfusionMatrix::from_pairs(classes, labels, &pred)?)?.macro_f1)
}

fn apply_freeze(store: &mut ParamStore, plan: &StagePlan, epoch: f64) {
    store.set_trainable(true);
    if epoch < plan.unfreeze_epoch {
        let groups: Vec<&str> = plan.freeze_groups.iter().map(String::as_str).collect();
        store.set_group_trainable(&groups, false);
    }
}

fn head_masks(head: &Mlp, rng: &mut seed::Rng, rows: usize, rate: f64) -> Option<DropoutMasks> {
    (rate > 0.0).then(|| head.masks(rng, rows, rate))
}

fn terms_map(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

/// Probabilities of both experts on a split, with their pre-head features.
pub fn expert_probs(
    local: &LocalExpert,
    global: &GlobalExpert,
    data: &Split,
) -> Result<(ExpertOutput, ExpertOutput)> {
    Ok((
        local.predict(&data.local, &data.tissues)?,
        global.predict(&data.local, &data.ctx, &data.tissues)?,
    ))
}

struct LocalModel<'a> {
    expert: &'a mut LocalExpert,
    opt: OptimizerState,
    plan: &'a StagePlan,
    train: &'a Split,
    val: &'a Split,
    weights: ClassWeights,
    eps: f64,
}

impl StageModel for LocalModel<'_> {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.expert.store]
    }

    fn restore(&mut self, mut stores: Vec<ParamStore>) {
        self.expert.store = stores.remove(0);
    }

    fn prepare(&mut self, epoch: f64) {
        apply_freeze(&mut self.expert.store, self.plan, epoch);
    }

    fn step(&mut self, batch: &[usize], ctx: &mut StepCtx) -> Result<BTreeMap<String, f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(self.train.local.select_rows(batch));
        let tissues = self.train.batch_tissues(batch);
        let labels = self.train.batch_labels(batch);
        let masks = head_masks(&self.expert.head, ctx.rng, batch.len(), self.plan.dropout);
        let (_, z) = self
            .expert
            .forward(&mut tape, &self.expert.store, x, &tissues, masks.as_ref());
        let ell = ce_terms(&mut tape, z, &labels, &self.weights, self.eps)?;
        let loss = tape.mean(ell);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Ok(terms_map(&[("ce", value)]));
        }
        let grads = tape
            .backward(loss)?
            .for_store(LOCAL_STORE, self.expert.store.len());
        let (plan, f) = (self.plan, ctx.lr_factor);
        self.opt
            .step(&mut self.expert.store, &grads, |g| plan.rate(g, f))?;
        Ok(terms_map(&[("ce", value)]))
    }

    fn validate(&self) -> Result<f64> {
        let out = self.expert.predict(&self.val.local, &self.val.tissues)?;
        macro_f1(self.val.classes, &self.val.labels, &out.probs)
    }
}

pub fn train_local(
    expert: &mut LocalExpert,
    train: &Split,
    val: &Split,
    plan: &StagePlan,
    loss: &ExpertLoss,
    seed_root: u64,
) -> Result<StageOutcome> {
    let weights = class_weights(train, loss)?;
    let opt = OptimizerState::new(&expert.store, plan.adam);
    let mut model = LocalModel {
        expert,
        opt,
        plan,
        train,
        val,
        weights,
        eps: loss.label_smoothing,
    };
    let out = run_stage(Stage::Local, plan, train.len(), seed_root, &mut model);
    model.expert.store.set_trainable(true);
    out
}

struct GlobalModel<'a> {
    expert: &'a mut GlobalExpert,
    opt: OptimizerState,
    plan: &'a StagePlan,
    opts: &'a GlobalStageOptions,
    train: &'a Split,
    val: &'a Split,
    p_local_y: Vec<f64>,
    weights: ClassWeights,
    eps: f64,
}

impl StageModel for GlobalModel<'_> {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.expert.store]
    }

    fn restore(&mut self, mut stores: Vec<ParamStore>) {
        self.expert.store = stores.remove(0);
    }

    fn prepare(&mut self, epoch: f64) {
        apply_freeze(&mut self.expert.store, self.plan, epoch);
    }

    fn step(&mut self, batch: &[usize], ctx: &mut StepCtx) -> Result<BTreeMap<String, f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(self.train.local.select_rows(batch));
        let c = tape.constant(self.train.ctx.select_rows(batch));
        let tissues = self.train.batch_tissues(batch);
        let labels = self.train.batch_labels(batch);
        let p_y: Vec<f64> = batch.iter().map(|&i| self.p_local_y[i]).collect();
        let alpha = alpha_at(ctx.epoch, self.opts.alpha0, self.opts.alpha_ramp_epochs);
        let drop = context_drop(ctx.rng, batch.len(), self.opts.context_dropout);
        let masks = head_masks(&self.expert.head, ctx.rng, batch.len(), self.plan.dropout);
        let mode = GlobalMode {
            alpha,
            drop_context: Some(&drop),
        };
        let (_, z) = self.expert.forward(
            &mut tape,
            &self.expert.store,
            x,
            c,
            &tissues,
            mode,
            masks.as_ref(),
        );
        let (loss, t) = global_loss(
            &mut tape,
            z,
            &labels,
            &p_y,
            &self.weights,
            self.eps,
            self.opts.gamma_focal,
            self.opts.lambda_stable,
        )?;
        let terms = terms_map(&[
            ("main", t.main),
            ("stable", t.stable),
            ("total", t.total),
            ("alpha", alpha),
        ]);
        if !t.total.is_finite() {
            return Ok(terms);
        }
        let grads = tape
            .backward(loss)?
            .for_store(GLOBAL_STORE, self.expert.store.len());
        let (plan, f) = (self.plan, ctx.lr_factor);
        self.opt
            .step(&mut self.expert.store, &grads, |g| plan.rate(g, f))?;
        Ok(terms)
    }

    fn validate(&self) -> Result<f64> {
        let out = self
            .expert
            .predict(&self.val.local, &self.val.ctx, &self.val.tissues)?;
        macro_f1(self.val.classes, &self.val.labels, &out.probs)
    }
}

/// Trains the global expert against a frozen local expert.
#[allow(clippy::too_many_arguments)]
pub fn train_global(
    expert: &mut GlobalExpert,
    local: &LocalExpert,
    train: &Split,
    val: &Split,
    plan: &StagePlan,
    loss: &ExpertLoss,
    opts: &GlobalStageOptions,
    seed_root: u64,
) -> Result<StageOutcome> {
    if !(0.0..=1.0).contains(&opts.alpha0) || !(0.0..=1.0).contains(&opts.context_dropout) {
        return Err(Error::config("alpha0 and context_dropout must lie in [0, 1]"));
    }
    if opts.gamma_focal < 0.0 || opts.lambda_stable < 0.0 {
        return Err(Error::config(
            "gamma_focal and lambda_stable must be non-negative",
        ));
    }
    let p_local = local.predict(&train.local, &train.tissues)?;
    let p_local_y = p_local
        .probs
        .iter()
        .zip(&train.labels)
        .map(|(p, &y)| p.get(y))
        .collect();
    let weights = class_weights(train, loss)?;
    let opt = OptimizerState::new(&expert.store, plan.adam);
    let mut model = GlobalModel {
        expert,
        opt,
        plan,
        opts,
        train,
        val,
        p_local_y,
        weights,
        eps: loss.label_smoothing,
    };
    let out = run_stage(Stage::Global, plan, train.len(), seed_root, &mut model);
    model.expert.store.set_trainable(true);
    out
}

/// Expert outputs computed once; the gate stage never changes the features.
struct Cached {
    f_local: Matrix,
    s_global: Matrix,
    p_local: Vec<ProbVector>,
    p_global: Vec<ProbVector>,
}

impl Cached {
    fn new(local: &LocalExpert, global: &GlobalExpert, data: &Split) -> Result<Self> {
        let (l, g) = expert_probs(local, global, data)?;
        Ok(Self {
            f_local: l.features,
            s_global: g.features,
            p_local: l.probs,
            p_global: g.probs,
        })
    }
}

fn probs_of(m: &Matrix) -> Vec<ProbVector> {
    (0..m.rows())
        .map(|r| ProbVector::new_unchecked(m.row(r).to_vec()))
        .collect()
}

struct GateModel<'a> {
    local: &'a mut LocalExpert,
    global: &'a mut GlobalExpert,
    gate: &'a mut GateNet,
    opts: OptState,
    plan: &'a StagePlan,
    cfg: &'a GateStageOptions,
    train: Cached,
    val: Cached,
    train_labels: &'a [usize],
    val_labels: &'a [usize],
    classes: usize,
    weights: ClassWeights,
    eps: f64,
    heads_on: bool,
}

struct OptState {
    gate: OptimizerState,
    local: OptimizerState,
    global: OptimizerState,
}

impl GateModel<'_> {
    fn head_step(
        &self,
        tape: &mut Tape,
        head: &Mlp,
        store: &ParamStore,
        features: Matrix,
        rng: &mut seed::Rng,
    ) -> (Var, Var) {
        let x = tape.constant(features);
        let masks = head_masks(head, rng, tape.value(x).rows(), self.cfg.head_dropout);
        let z = head.forward(tape, store, x, masks.as_ref());
        let p = tape.softmax(z);
        (z, p)
    }
}

impl StageModel for GateModel<'_> {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![&self.gate.store, &self.local.store, &self.global.store]
    }

    fn restore(&mut self, mut stores: Vec<ParamStore>) {
        self.global.store = stores.pop().expect("three stores");
        self.local.store = stores.pop().expect("three stores");
        self.gate.store = stores.pop().expect("three stores");
    }

    fn prepare(&mut self, epoch: f64) {
        self.heads_on = self.cfg.reinit_heads || (self.cfg.unfreeze_heads && epoch >= self.cfg.warmup_epochs);
        self.gate.store.set_trainable(true);
        for store in [&mut self.local.store, &mut self.global.store] {
            store.set_trainable(false);
            if self.heads_on {
                store.set_group_trainable(&["head"], true);
            }
        }
    }

    fn step(&mut self, batch: &[usize], ctx: &mut StepCtx) -> Result<BTreeMap<String, f64>> {
        let labels: Vec<usize> = batch.iter().map(|&i| self.train_labels[i]).collect();
        let f = self.train.f_local.select_rows(batch);
        let s = self.train.s_global.select_rows(batch);
        let mut tape = Tape::new();
        let (pl_var, pg_var, aux, pl, pg) = if self.heads_on {
            let (zl, pl) = self.head_step(&mut tape, &self.local.head, &self.local.store, f.clone(), ctx.rng);
            let (zg, pg) = self.head_step(
                &mut tape,
                &self.global.head,
                &self.global.store,
                s.clone(),
                ctx.rng,
            );
            let aux = if self.cfg.loss.lambda_aux > 0.0 {
                let el = ce_terms(&mut tape, zl, &labels, &self.weights, self.eps)?;
                let eg = ce_terms(&mut tape, zg, &labels, &self.weights, self.eps)?;
                let ml = tape.mean(el);
                let mg = tape.mean(eg);
                Some(tape.add(ml, mg))
            } else {
                None
            };
            let (pl_v, pg_v) = (probs_of(tape.value(pl)), probs_of(tape.value(pg)));
            (pl, pg, aux, pl_v, pg_v)
        } else {
            let pl_v: Vec<ProbVector> = batch.iter().map(|&i| self.train.p_local[i].clone()).collect();
            let pg_v: Vec<ProbVector> = batch.iter().map(|&i| self.train.p_global[i].clone()).collect();
            let to_m = |v: &[ProbVector]| {
                Matrix::from_rows(&v.iter().map(|p| p.as_slice().to_vec()).collect::<Vec<_>>())
            };
            let pl = tape.constant(to_m(&pl_v)?);
            let pg = tape.constant(to_m(&pg_v)?);
            (pl, pg, None, pl_v, pg_v)
        };
        let stats = tape.constant(stats_matrix(&pl, &pg)?);
        let fv = tape.constant(f);
        let sv = tape.constant(s);
        let masks =
            (self.plan.dropout > 0.0).then(|| self.gate.mlp.masks(ctx.rng, batch.len(), self.plan.dropout));
        let logit = self
            .gate
            .forward(&mut tape, &self.gate.store, fv, sv, stats, masks.as_ref());
        let targets = GateTargets::new(&pl, &pg, &labels, &self.cfg.loss)?;
        let (loss, t) = gate_losses(
            &mut tape,
            logit,
            pl_var,
            pg_var,
            &labels,
            &targets,
            &self.cfg.loss,
            self.cfg.mask,
            aux,
        )?;
        let terms = terms_map(&[
            ("mix", t.mix),
            ("gate", t.gate),
            ("align", t.align),
            ("ent", t.ent),
            ("aux", t.aux),
            ("total", t.total),
            ("clamped", t.clamped as f64),
        ]);
        if !t.total.is_finite() {
            return Ok(terms);
        }
        let grads = tape.backward(loss)?;
        let (plan, fac) = (self.plan, ctx.lr_factor);
        let rate = |g: &str| plan.rate(g, fac);
        let g_gate = grads.for_store(GATE_STORE, self.gate.store.len());
        self.opts.gate.step(&mut self.gate.store, &g_gate, rate)?;
        if self.heads_on {
            let g_local = grads.for_store(LOCAL_STORE, self.local.store.len());
            self.opts.local.step(&mut self.local.store, &g_local, rate)?;
            let g_global = grads.for_store(GLOBAL_STORE, self.global.store.len());
            self.opts.global.step(&mut self.global.store, &g_global, rate)?;
        }
        Ok(terms)
    }

    fn validate(&self) -> Result<f64> {
        let (pl, pg) = if self.heads_on || self.cfg.reinit_heads {
            (
                head_probs(&self.local.head, &self.local.store, &self.val.f_local)?,
                head_probs(&self.global.head, &self.global.store, &self.val.s_global)?,
            )
        } else {
            (self.val.p_local.clone(), self.val.p_global.clone())
        };
        let stats = stats_matrix(&pl, &pg)?;
        let g = self.gate.predict(&self.val.f_local, &self.val.s_global, &stats)?;
        let mix = pl
            .iter()
            .zip(&pg)
            .zip(&g)
            .map(|((l, r), &g)| fuse(l, r, g))
            .collect::<Result<Vec<_>>>()?;
        macro_f1(self.classes, self.val_labels, &mix)
    }
}

/// Trains the fusion gate over frozen expert features.
#[allow(clippy::too_many_arguments)]
pub fn train_gate(
    gate: &mut GateNet,
    local: &mut LocalExpert,
    global: &mut GlobalExpert,
    train: &Split,
    val: &Split,
    plan: &StagePlan,
    loss: &ExpertLoss,
    opts: &GateStageOptions,
    seed_root: u64,
) -> Result<StageOutcome> {
    opts.loss.validate()?;
    if !(0.0..1.0).contains(&opts.head_dropout) || opts.warmup_epochs < 0.0 {
        return Err(Error::config(
            "head_dropout must lie in [0, 1) and warmup_epochs be non-negative",
        ));
    }
    if opts.reinit_heads {
        let mut rng = seed::stream(seed_root, "gate.reinit");
        local.head.reinit(&mut local.store, &mut rng);
        global.head.reinit(&mut global.store, &mut rng);
    }
    let cached_train = Cached::new(local, global, train)?;
    let cached_val = Cached::new(local, global, val)?;
    let weights = class_weights(train, loss)?;
    let opt_state = OptState {
        gate: OptimizerState::new(&gate.store, plan.adam),
        local: OptimizerState::new(&local.store, plan.adam),
        global: OptimizerState::new(&global.store, plan.adam),
    };
    let mut model = GateModel {
        local,
        global,
        gate,
        opts: opt_state,
        plan,
        cfg: opts,
        train: cached_train,
        val: cached_val,
        train_labels: &train.labels,
        val_labels: &val.labels,
        classes: train.classes,
        weights,
        eps: loss.label_smoothing,
        heads_on: false,
    };
    let out = run_stage(Stage::Gate, plan, train.len(), seed_root, &mut model);
    for store in [
        &mut model.local.store,
        &mut model.global.store,
        &mut model.gate.store,
    ] {
        store.set_trainable(true);
    }
    out
}
