//! Optimizer, schedules and the three stage drivers.

mod optim;
mod stages;

pub use optim::{AdamWConfig, OptimizerState, Schedule, StepRate};
pub use stages::{
    expert_probs, train_gate, train_global, train_local, ExpertLoss, GateStageOptions, GlobalStageOptions,
    Split,
};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Local,
    Global,
    Gate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Local => "local",
            Stage::Global => "global",
            Stage::Gate => "gate",
        }
    }
}

/// Schedule and optimizer settings shared by every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-group learning-rate multipliers; missing groups use 1.
    #[serde(default)]
    pub group_lr: BTreeMap<String, f64>,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    #[serde(default)]
    pub adam: AdamWConfig,
    /// Groups held frozen until `unfreeze_epoch`.
    #[serde(default)]
    pub freeze_groups: Vec<String>,
    #[serde(default)]
    pub unfreeze_epoch: f64,
    /// Dropout on head hidden layers.
    #[serde(default)]
    pub dropout: f64,
    /// Validation cadence in epochs.
    pub val_every: f64,
    pub patience: usize,
}

impl StagePlan {
    pub fn local() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            lr: 3e-4,
            group_lr: BTreeMap::new(),
            weight_decay: 2e-5,
            warmup_steps: 100,
            adam: AdamWConfig::default(),
            freeze_groups: Vec::new(),
            unfreeze_epoch: 0.0,
            dropout: 0.0,
            val_every: 0.25,
            patience: 4,
        }
    }

    pub fn global() -> Self {
        Self {
            epochs: 8,
            freeze_groups: vec!["morph".into()],
            unfreeze_epoch: 1.0,
            ..Self::local()
        }
    }

    pub fn gate() -> Self {
        Self {
            epochs: 4,
            lr: 8e-4,
            weight_decay: 1e-5,
            group_lr: [("head".to_string(), 0.25)].into_iter().collect(),
            dropout: 0.1,
            ..Self::local()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        let rates = [self.lr, self.weight_decay, self.val_every, self.unfreeze_epoch];
        if rates.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.val_every == 0.0 {
            return Err(Error::config(
                "lr, weight_decay, val_every and unfreeze_epoch must be finite, val_every > 0",
            ));
        }
        if self.group_lr.values().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config(
                "group learning-rate multipliers must be finite and non-negative",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.unfreeze_epoch > self.epochs as f64 {
            return Err(Error::config("unfreeze_epoch lies beyond the stage length"));
        }
        Ok(())
    }

    pub fn rate(&self, group: &str, factor: f64) -> StepRate {
        StepRate {
            lr: self.lr * factor * self.group_lr.get(group).copied().unwrap_or(1.0),
            weight_decay: self.weight_decay,
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    /// Validation happens every this many steps.
    pub fn val_interval(&self, n: usize) -> usize {
        ((self.val_every * self.steps_per_epoch(n) as f64).round() as usize).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Stops after more than `patience` consecutive validations without a strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    bad: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            bad: 0,
        }
    }

    pub fn observe(&mut self, score: f64) -> Verdict {
        if self.best.is_none_or(|b| score > b) {
            self.best = Some(score);
            self.bad = 0;
            return Verdict::Improved;
        }
        self.bad += 1;
        if self.bad > self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: f64,
    pub stage: Stage,
    /// Means over the steps since the previous entry.
    pub loss_terms: BTreeMap<String, f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_macro_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub best_val_macro_f1: f64,
    pub best_step: usize,
    pub steps: usize,
    pub stopped_early: bool,
    pub log: Vec<LogEntry>,
}

/// Per-step context handed to a stage model.
pub struct StepCtx<'a> {
    pub step: usize,
    /// Fractional epochs completed before this step.
    pub epoch: f64,
    pub lr_factor: f64,
    pub rng: &'a mut seed::Rng,
}

pub(crate) trait StageModel {
    fn stores(&self) -> Vec<&ParamStore>;
    fn restore(&mut self, stores: Vec<ParamStore>);
    /// Sets trainability for the given point in the stage.
    fn prepare(&mut self, epoch: f64);
    fn step(&mut self, batch: &[usize], ctx: &mut StepCtx) -> Result<BTreeMap<String, f64>>;
    fn validate(&self) -> Result<f64>;
}

/// Shuffled mini-batches, early stopping on validation macro-F1, best
/// parameters restored at the end and on numerical failure.
pub(crate) fn run_stage(
    stage: Stage,
    plan: &StagePlan,
    n_train: usize,
    seed_root: u64,
    model: &mut impl StageModel,
) -> Result<StageOutcome> {
    plan.validate()?;
    if n_train == 0 {
        return Err(Error::invalid("empty training split"));
    }
    let per_epoch = plan.steps_per_epoch(n_train);
    let interval = plan.val_interval(n_train);
    let total = per_epoch * plan.epochs;
    let schedule = Schedule {
        warmup_steps: plan.warmup_steps,
    };
    let mut rng = seed::stream(seed_root, &format!("{}.dropout", stage.name()));
    let mut stopper = EarlyStopping::new(plan.patience);
    let mut log = Vec::new();
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut since = 0usize;

    model.prepare(0.0);
    let init = model.validate()?;
    stopper.observe(init);
    let mut best: Vec<ParamStore> = model.stores().into_iter().cloned().collect();
    let mut best_step = 0;
    log.push(LogEntry {
        step: 0,
        epoch: 0.0,
        stage,
        loss_terms: BTreeMap::new(),
        lr: 0.0,
        val_macro_f1: Some(init),
    });

    let mut step = 0;
    let mut stopped_early = false;
    'outer: for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut seed::indexed(
            seed_root,
            &format!("{}.order", stage.name()),
            epoch as u64,
        ));
        for batch in order.chunks(plan.batch_size) {
            let epoch_f = step as f64 / per_epoch as f64;
            model.prepare(epoch_f);
            step += 1;
            let factor = schedule.factor(step);
            let mut ctx = StepCtx {
                step,
                epoch: epoch_f,
                lr_factor: factor,
                rng: &mut rng,
            };
            let terms = match model.step(batch, &mut ctx) {
                Ok(t) if t.values().all(|v| v.is_finite()) => t,
                Ok(_) => {
                    model.restore(best);
                    return Err(Error::Numerical(format!(
                        "non-finite {} loss at step {step}",
                        stage.name()
                    )));
                }
                Err(e) => {
                    model.restore(best);
                    return Err(e);
                }
            };
            for (k, v) in terms {
                *sums.entry(k).or_default() += v;
            }
            since += 1;
            if step % interval == 0 || step == total {
                let score = model.validate()?;
                log.push(LogEntry {
                    step,
                    epoch: step as f64 / per_epoch as f64,
                    stage,
                    loss_terms: sums.iter().map(|(k, v)| (k.clone(), v / since as f64)).collect(),
                    lr: plan.lr * factor,
                    val_macro_f1: Some(score),
                });
                sums.clear();
                since = 0;
                match stopper.observe(score) {
                    Verdict::Improved => {
                        best = model.stores().into_iter().cloned().collect();
                        best_step = step;
                    }
                    Verdict::Continue => {}
                    Verdict::Stop => {
                        stopped_early = step < total;
                        break 'outer;
                    }
                }
            }
        }
    }
    model.restore(best);
    Ok(StageOutcome {
        best_val_macro_f1: stopper.best.unwrap_or(init),
        best_step,
        steps: step,
        stopped_early,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_zero_stops_at_first_worse_validation() {
        let mut s = EarlyStopping::new(0);
        assert_eq!(s.observe(0.5), Verdict::Improved);
        assert_eq!(s.observe(0.4), Verdict::Stop);
    }

    #[test]
    fn patience_counts_consecutive_misses() {
        let mut s = EarlyStopping::new(2);
        s.observe(0.5);
        assert_eq!(s.observe(0.5), Verdict::Continue);
        assert_eq!(s.observe(0.6), Verdict::Improved);
        assert_eq!(s.observe(0.1), Verdict::Continue);
        assert_eq!(s.observe(0.1), Verdict::Continue);
        assert_eq!(s.observe(0.1), Verdict::Stop);
        assert_eq!(s.best, Some(0.6));
    }

    #[test]
    fn plan_defaults_validate() {
        for p in [StagePlan::local(), StagePlan::global(), StagePlan::gate()] {
            p.validate().unwrap();
        }
        assert_eq!(StagePlan::local().val_interval(1000), 2);
        let bad = StagePlan {
            unfreeze_epoch: 20.0,
            ..StagePlan::global()
        };
        assert!(bad.validate().is_err());
    }
}
