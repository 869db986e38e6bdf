//! AdamW with per-group learning rates and linear warm-up / linear decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Real;

/// Parameters whose names start with this prefix use the title-encoder
/// learning rate; all others use the base rate.
pub const TITLE_GROUP_PREFIX: &str = "news.title.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr_title: f64,
    pub lr_other: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_title: 1e-5,
            lr_other: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("optimizer: {what}")));
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must be in [0, 1]");
        }
        if self.lr_title < 0.0 || self.lr_other < 0.0 {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must be in [0, 1)");
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative");
        }
        Ok(())
    }
}

/// Linear warm-up over `warmup_fraction · total_steps`, then linear decay to
/// zero at `total_steps`. Steps are zero-based; the first step already gets
/// `1 / warmup_steps` so no update is wasted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl Schedule {
    pub fn new(total_steps: u64, warmup_fraction: f64) -> Self {
        let warmup_steps = (warmup_fraction * total_steps as f64).round() as u64;
        Self {
            total_steps,
            warmup_steps: warmup_steps.min(total_steps),
        }
    }

    pub fn multiplier(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps - self.warmup_steps;
        (self.total_steps - step) as f64 / decay as f64
    }
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

pub struct AdamW<T: Real> {
    pub config: AdamWConfig,
    pub schedule: Schedule,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, total_steps: u64) -> Result<Self> {
        config.validate()?;
        if total_steps == 0 {
            return Err(Error::Config("optimizer needs at least one step".into()));
        }
        Ok(Self {
            schedule: Schedule::new(total_steps, config.warmup_fraction),
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr_multiplier(&self) -> f64 {
        self.schedule.multiplier(self.step)
    }

    fn group_lr(&self, name: &str) -> f64 {
        if name.starts_with(TITLE_GROUP_PREFIX) {
            self.config.lr_title
        } else {
            self.config.lr_other
        }
    }

    /// Applies one update from the populated grad slots and advances the
    /// schedule. Returns the multiplier that was used.
    pub fn step(&mut self, store: &mut ParameterStore<T>) -> Result<f64> {
        let mult = self.schedule.multiplier(self.step);
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let eps = T::lit(c.eps);
        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let Some(grad) = &p.grad else { continue };
            if !grad.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for `{name}`"
                )));
            }
            let lr = if name.starts_with(TITLE_GROUP_PREFIX) {
                c.lr_title
            } else {
                c.lr_other
            } * mult;
            let n = p.value.numel();
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            let step_size = T::lit(lr / bc1);
            let decay = T::lit(1.0 - lr * c.weight_decay);
            let inv_bc2 = T::lit(1.0 / bc2);
            let g = grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g[i];
                mom.m[i] = b1 * mom.m[i] + (T::one() - b1) * gi;
                mom.v[i] = b2 * mom.v[i] + (T::one() - b2) * gi * gi;
                let denom = (mom.v[i] * inv_bc2).sqrt() + eps;
                *w = *w * decay - step_size * mom.m[i] / denom;
            }
        }
        store.step_count += 1;
        Ok(mult)
    }

    /// Effective learning rate of the group `name` belongs to.
    pub fn current_lr(&self, name: &str) -> f64 {
        self.group_lr(name) * self.lr_multiplier()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn warmup_reaches_one_at_end_of_ramp() {
        let s = Schedule::new(100, 0.1);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.multiplier(10) - 1.0).abs() < 1e-12);
        assert!((s.multiplier(0) - 0.1).abs() < 1e-12);
        assert!((s.multiplier(55) - 0.5).abs() < 1e-12);
        assert_eq!(s.multiplier(100), 0.0);
        assert_eq!(s.multiplier(1000), 0.0);
    }

    #[test]
    fn no_warmup_starts_at_full_rate() {
        let s = Schedule::new(10, 0.0);
        assert_eq!(s.multiplier(0), 1.0);
        assert!((0..20).all(|i| s.multiplier(i) >= 0.0));
    }

    #[test]
    fn zero_grads_without_decay_leave_params_unchanged() {
        let mut store = ParameterStore::<f32>::new();
        store.insert("w", Tensor::vector(vec![1.0, -2.0])).unwrap();
        store
            .accumulate_grad("w", &Tensor::vector(vec![0.0, 0.0]))
            .unwrap();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 10).unwrap();
        opt.step(&mut store).unwrap();
        assert_eq!(store.value("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn groups_use_their_own_rates() {
        let mut store = ParameterStore::<f64>::new();
        store
            .insert("news.title.w", Tensor::vector(vec![0.0]))
            .unwrap();
        store.insert("user.w", Tensor::vector(vec![0.0])).unwrap();
        store
            .accumulate_grad("news.title.w", &Tensor::vector(vec![1.0]))
            .unwrap();
        store
            .accumulate_grad("user.w", &Tensor::vector(vec![1.0]))
            .unwrap();
        let cfg = AdamWConfig {
            warmup_fraction: 0.0,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, 10).unwrap();
        opt.step(&mut store).unwrap();
        // First Adam step moves by ~lr in the direction of -sign(grad).
        let a = store.value("news.title.w").unwrap().data()[0];
        let b = store.value("user.w").unwrap().data()[0];
        assert!((a + 1e-5).abs() < 1e-9, "{a}");
        assert!((b + 1e-4).abs() < 1e-8, "{b}");
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("p", Tensor::vector(vec![1.0])).unwrap();
        store.freeze("p").unwrap();
        store
            .accumulate_grad("p", &Tensor::vector(vec![1.0]))
            .unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), 5).unwrap();
        opt.step(&mut store).unwrap();
        assert_eq!(store.value("p").unwrap().data(), &[1.0]);
    }
}
