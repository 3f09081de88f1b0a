use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning rate and decoupled weight decay for one parameter on one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRate {
    pub lr: f64,
    pub weight_decay: f64,
}

/// AdamW moments for every slot of one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub cfg: AdamWConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    /// Updates applied per slot; frozen slots keep their count.
    steps: Vec<u64>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            steps: vec![0; store.len()],
        }
    }

    pub fn steps(&self, slot: usize) -> u64 {
        self.steps[slot]
    }

    /// Updates every trainable slot that has a gradient. Nothing is touched
    /// if any gradient is non-finite.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Matrix>],
        rate: impl Fn(&str) -> StepRate,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::dim("one gradient slot per parameter is required"));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != store.value(i).shape() {
                    return Err(Error::dim(format!(
                        "gradient shape mismatch for {}",
                        store.get(i).name
                    )));
                }
                if !g.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient for {}",
                        store.get(i).name
                    )));
                }
            }
        }
        let AdamWConfig { beta1, beta2, eps } = self.cfg;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.get(i).trainable {
                continue;
            }
            let r = rate(&store.get(i).group);
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(i).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / c1;
                if m_hat != 0.0 {
                    p[k] -= r.lr * m_hat / ((v[k] / c2).sqrt() + eps);
                }
                p[k] -= r.lr * r.weight_decay * p[k];
            }
        }
        Ok(())
    }
}

/// Linear warm-up to the base rate, constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: usize,
}

impl Schedule {
    /// Multiplier for update number `step` (1-based).
    pub fn factor(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new(9);
        s.add("p", "head", Matrix::filled(1, 1, v));
        s
    }

    fn g(v: f64) -> Vec<Option<Matrix>> {
        vec![Some(Matrix::filled(1, 1, v))]
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut s = scalar_store(1.0);
        let cfg = AdamWConfig {
            eps: 0.0,
            ..Default::default()
        };
        let mut opt = OptimizerState::new(&s, cfg);
        opt.step(&mut s, &g(1.0), |_| StepRate {
            lr: 0.1,
            weight_decay: 0.0,
        })
        .unwrap();
        assert!((s.value(0).get(0, 0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut s = scalar_store(0.7);
        let mut opt = OptimizerState::new(&s, AdamWConfig::default());
        for _ in 0..5 {
            opt.step(&mut s, &g(0.0), |_| StepRate {
                lr: 0.5,
                weight_decay: 0.0,
            })
            .unwrap();
        }
        assert_eq!(s.value(0).get(0, 0), 0.7);
    }

    #[test]
    fn pure_decay() {
        let mut s = scalar_store(2.0);
        let mut opt = OptimizerState::new(&s, AdamWConfig::default());
        for k in 1..=3 {
            opt.step(&mut s, &g(0.0), |_| StepRate {
                lr: 1.0,
                weight_decay: 0.1,
            })
            .unwrap();
            assert!((s.value(0).get(0, 0) - 2.0 * 0.9f64.powi(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_and_nonfinite() {
        let mut s = scalar_store(1.0);
        let mut opt = OptimizerState::new(&s, AdamWConfig::default());
        let rate = |_: &str| StepRate {
            lr: 0.1,
            weight_decay: 0.1,
        };
        s.set_trainable(false);
        opt.step(&mut s, &g(3.0), rate).unwrap();
        assert_eq!(s.value(0).get(0, 0), 1.0);
        assert_eq!(opt.steps(0), 0);
        s.set_trainable(true);
        assert!(matches!(
            opt.step(&mut s, &g(f64::NAN), rate),
            Err(Error::Numerical(_))
        ));
        assert_eq!(s.value(0).get(0, 0), 1.0);
    }

    #[test]
    fn warmup() {
        let s = Schedule { warmup_steps: 4 };
        assert_eq!(s.factor(1), 0.25);
        assert_eq!(s.factor(4), 1.0);
        assert_eq!(s.factor(100), 1.0);
        assert_eq!(Schedule { warmup_steps: 0 }.factor(1), 1.0);
    }
}
