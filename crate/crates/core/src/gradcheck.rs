//! Central finite-difference verification of tape gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::experts::{
    ce_terms, effective_number_weights, global_loss, head_probs, ExpertDims, GlobalExpert, GlobalMode,
    LocalExpert,
};
use crate::gate::{gate_losses, stats_matrix, GateLossConfig, GateNet, GateNetConfig, GateTargets, LossMask};
use crate::params::{standard_normal, ParamStore};
use crate::seed;
use crate::tape::{Tape, Var};

/// Below this gradient magnitude the comparison becomes absolute: a relative
/// tolerance of 1e-4 then means an absolute tolerance of 1e-6.
pub const ZERO_SCALE: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |a − n| / max(|a|, |n|, ZERO_SCALE)` over every checked entry.
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Smallest ReLU input seen while evaluating; kinks closer than the step
    /// invalidate the finite difference.
    pub kink_margin: f64,
}

impl GradCheckReport {
    pub fn passed(&self, rel_tol: f64) -> bool {
        self.max_relative_error <= rel_tol
    }
}

pub fn entry_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(ZERO_SCALE);
    (analytic - numeric).abs() / scale
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences with step `step`, for every trainable entry in `stores`.
pub fn grad_check<F>(stores: &[ParamStore], f: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[ParamStore]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, stores)?;
    let grads = tape.backward(root)?;
    let mut kink_margin = tape.kink_margin();

    let eval = |stores: &[ParamStore], margin: &mut f64| -> Result<f64> {
        let mut t = Tape::new();
        let r = f(&mut t, stores)?;
        *margin = margin.min(t.kink_margin());
        let v = t.scalar(r);
        if !v.is_finite() {
            return Err(Error::Numerical("non-finite objective during grad check".into()));
        }
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
        kink_margin: f64::INFINITY,
    };
    let mut work = stores.to_vec();
    for (s, store) in stores.iter().enumerate() {
        for i in 0..store.len() {
            let p = store.get(i);
            if !p.trainable {
                continue;
            }
            let analytic = grads.param(store.key(i));
            for j in 0..p.value.len() {
                let orig = p.value.data()[j];
                work[s].value_mut(i).data_mut()[j] = orig + step;
                let plus = eval(&work, &mut kink_margin)?;
                work[s].value_mut(i).data_mut()[j] = orig - step;
                let minus = eval(&work, &mut kink_margin)?;
                work[s].value_mut(i).data_mut()[j] = orig;

                let numeric = (plus - minus) / (2.0 * step);
                let a = analytic.map_or(0.0, |g| g.data()[j]);
                let rel = entry_error(a, numeric);
                report.checked += 1;
                report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
                if rel > report.max_relative_error || report.worst.is_none() {
                    report.max_relative_error = rel;
                    report.worst = Some((p.name.clone(), j));
                }
            }
        }
    }
    report.kink_margin = kink_margin;
    Ok(report)
}

/// Cases run by [`suite`].
pub const SUITE_CASES: [&str; 8] = [
    "film",
    "local",
    "global",
    "gate.mix",
    "gate.gate",
    "gate.align",
    "gate.ent",
    "gate.all",
];

/// Finite-difference step used by [`suite`].
pub const SUITE_STEP: f64 = 1e-5;
const MAX_REDRAWS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteCase {
    pub case: &'static str,
    pub instance: usize,
    /// Instances discarded because a ReLU input sat within `10·step` of zero.
    pub redraws: usize,
    pub report: GradCheckReport,
}

fn randomize(store: &mut ParamStore, rng: &mut impl Rng) {
    for i in 0..store.len() {
        let (r, c) = store.value(i).shape();
        let mut m = standard_normal(rng, r, c);
        m.data_mut().iter_mut().for_each(|v| *v *= 0.5);
        *store.value_mut(i) = m;
    }
}

fn check_case(case: &str, rng: &mut seed::Rng) -> Result<GradCheckReport> {
    let (n, d, c, t) = (4, 8, 5, 3);
    let dims = ExpertDims {
        tissue_embed: 4,
        film_hidden: 6,
        head_hidden: 7,
        proj: 5,
    };
    let tissues: Vec<usize> = (0..n).map(|_| rng.random_range(0..t)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let counts: Vec<usize> = (0..c).map(|_| rng.random_range(1..20)).collect();
    let weights = effective_number_weights(&counts, 0.99)?;
    let x = standard_normal(rng, n, d);
    match case {
        "film" => {
            let mut e = LocalExpert::new(&dims, d, c, t, rng);
            randomize(&mut e.store, rng);
            let r = standard_normal(rng, n, d);
            let f = |tape: &mut Tape, s: &[ParamStore]| {
                let xv = tape.constant(x.clone());
                let h = e.film.modulate(tape, &s[0], xv, &tissues);
                let rv = tape.constant(r.clone());
                let prod = tape.mul(h, rv);
                Ok(tape.sum(prod))
            };
            grad_check(std::slice::from_ref(&e.store), f, SUITE_STEP)
        }
        "local" => {
            let mut e = LocalExpert::new(&dims, d, c, t, rng);
            randomize(&mut e.store, rng);
            let f = |tape: &mut Tape, s: &[ParamStore]| {
                let xv = tape.constant(x.clone());
                let (_, z) = e.forward(tape, &s[0], xv, &tissues, None);
                let ell = ce_terms(tape, z, &labels, &weights, 0.1)?;
                Ok(tape.mean(ell))
            };
            grad_check(std::slice::from_ref(&e.store), f, SUITE_STEP)
        }
        "global" => {
            let mut e = GlobalExpert::new(&dims, d, d, c, t, rng);
            randomize(&mut e.store, rng);
            let ctx = standard_normal(rng, n, d);
            let p_local_y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let drop: Vec<bool> = (0..n).map(|i| i % 3 == 1).collect();
            let alpha = rng.random_range(0.25..1.0);
            let f = |tape: &mut Tape, s: &[ParamStore]| {
                let xv = tape.constant(x.clone());
                let cv = tape.constant(ctx.clone());
                let mode = GlobalMode {
                    alpha,
                    drop_context: Some(&drop),
                };
                let (_, z) = e.forward(tape, &s[0], xv, cv, &tissues, mode, None);
                Ok(global_loss(tape, z, &labels, &p_local_y, &weights, 0.1, 2.0, 0.3)?.0)
            };
            grad_check(std::slice::from_ref(&e.store), f, SUITE_STEP)
        }
        _ => {
            let mask = match case {
                "gate.mix" => LossMask {
                    mix: true,
                    gate: false,
                    align: false,
                    ent: false,
                },
                "gate.gate" => LossMask {
                    mix: false,
                    gate: true,
                    align: false,
                    ent: false,
                },
                "gate.align" => LossMask {
                    mix: false,
                    gate: false,
                    align: true,
                    ent: false,
                },
                "gate.ent" => LossMask {
                    mix: false,
                    gate: false,
                    align: false,
                    ent: true,
                },
                "gate.all" => LossMask::default(),
                other => return Err(Error::invalid(format!("unknown gradient case {other:?}"))),
            };
            let cfg = GateLossConfig {
                lambda_aux: if case == "gate.all" { 0.5 } else { 0.0 },
                ..Default::default()
            };
            let mut local = LocalExpert::new(&dims, d, c, t, rng);
            let mut global = GlobalExpert::new(&dims, d, d, c, t, rng);
            let mut net = GateNet::new(
                &GateNetConfig {
                    proj: 4,
                    hidden: vec![5],
                },
                d,
                2 * dims.proj,
                rng,
            );
            for s in [&mut local.store, &mut global.store, &mut net.store] {
                randomize(s, rng);
            }
            local.store.set_trainable(false);
            global.store.set_trainable(false);
            local.store.set_group_trainable(&["head"], true);
            global.store.set_group_trainable(&["head"], true);
            let s_feat = standard_normal(rng, n, 2 * dims.proj);
            // Stats and targets are detached in training, so they stay fixed at
            // the unperturbed parameters here.
            let pl_v = head_probs(&local.head, &local.store, &x)?;
            let pg_v = head_probs(&global.head, &global.store, &s_feat)?;
            let stats = stats_matrix(&pl_v, &pg_v)?;
            let targets = GateTargets::new(&pl_v, &pg_v, &labels, &cfg)?;
            let f = |tape: &mut Tape, st: &[ParamStore]| {
                let fv = tape.constant(x.clone());
                let sv = tape.constant(s_feat.clone());
                let zl = local.head.forward(tape, &st[1], fv, None);
                let zg = global.head.forward(tape, &st[2], sv, None);
                let pl = tape.softmax(zl);
                let pg = tape.softmax(zg);
                let aux = if cfg.lambda_aux > 0.0 {
                    let el = ce_terms(tape, zl, &labels, &weights, 0.1)?;
                    let eg = ce_terms(tape, zg, &labels, &weights, 0.1)?;
                    let (ml, mg) = (tape.mean(el), tape.mean(eg));
                    Some(tape.add(ml, mg))
                } else {
                    None
                };
                let rv = tape.constant(stats.clone());
                let a = net.forward(tape, &st[0], fv, sv, rv, None);
                Ok(gate_losses(tape, a, pl, pg, &labels, &targets, &cfg, mask, aux)?.0)
            };
            grad_check(
                &[net.store.clone(), local.store.clone(), global.store.clone()],
                f,
                SUITE_STEP,
            )
        }
    }
}

/// Runs every case in [`SUITE_CASES`] on `instances` randomized small
/// problems (`d = 8`, `C = 5`). Instances whose finite differences would
/// straddle a ReLU kink are redrawn.
pub fn suite(instances: usize, seed_root: u64) -> Result<Vec<SuiteCase>> {
    let mut out = Vec::with_capacity(instances * SUITE_CASES.len());
    for case in SUITE_CASES {
        for instance in 0..instances {
            let mut redraws = 0;
            loop {
                let index = (instance * MAX_REDRAWS + redraws) as u64;
                let mut rng = seed::indexed(seed_root, &format!("gradcheck.{case}"), index);
                let report = check_case(case, &mut rng)?;
                if report.kink_margin > 10.0 * SUITE_STEP || redraws + 1 == MAX_REDRAWS {
                    out.push(SuiteCase {
                        case,
                        instance,
                        redraws,
                        report,
                    });
                    break;
                }
                redraws += 1;
            }
        }
    }
    Ok(out)
}
