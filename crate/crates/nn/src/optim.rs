//! AdamW with a linear-warmup / cosine-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::NnError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { lr_peak: 5e-5, lr_min: 2.5e-6, warmup_steps: 1_000, decay_steps: 30_000 }
    }
}

impl Schedule {
    /// Linear ramp from 0 to `lr_peak` over `warmup_steps`, cosine from
    /// `lr_peak` to `lr_min` until `decay_steps`, then flat at `lr_min`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.lr_peak * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.decay_steps {
            return self.lr_min;
        }
        let span = (self.decay_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.lr_min + (self.lr_peak - self.lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 1e-10, schedule: Schedule::default() }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate the next call to [`AdamW::step`] will use.
    pub fn next_lr(&self) -> f64 {
        self.config.schedule.lr_at(self.step + 1)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), NnError> {
        if self.first.len() != store.len() {
            return Err(NnError::Shape("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        let c = &self.config;
        let lr = c.schedule.lr_at(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id);
            let (m, v) = (&mut self.first[id.index()], &mut self.second[id.index()]);
            if g.shape() != m.shape() {
                return Err(NnError::Shape(format!("gradient shape for {}", id.index())));
            }
            let p = store.get_mut(id);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = c.beta1 * *mv + (1.0 - c.beta1) * gv;
                *vv = c.beta2 * *vv + (1.0 - c.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + c.eps);
                *pv -= lr * (update + c.weight_decay * *pv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = AdamWConfig::default();
        assert_eq!((c.beta1, c.beta2, c.weight_decay), (0.9, 0.95, 1e-10));
        assert_eq!(c.schedule.lr_peak, 5e-5);
        assert_eq!(c.schedule.lr_min, 2.5e-6);
        assert_eq!(c.schedule.warmup_steps, 1_000);
        assert_eq!(c.schedule.decay_steps, 30_000);
    }

    #[test]
    fn schedule_landmarks() {
        let s = Schedule::default();
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(500) - 2.5e-5).abs() < 1e-18);
        assert_eq!(s.lr_at(1_000), 5e-5);
        assert!((s.lr_at(30_000) - 2.5e-6).abs() < 1e-18);
        assert_eq!(s.lr_at(40_000), 2.5e-6);
        let mid = s.lr_at(15_500);
        let expected = 2.5e-6 + (5e-5 - 2.5e-6) * (1.0 + (std::f64::consts::FRAC_PI_2).cos()) / 2.0;
        assert!((mid - expected).abs() < 1e-15);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let s = Schedule::default();
        let mut prev = s.lr_at(1_000);
        for step in (1_001..30_000).step_by(97) {
            let lr = s.lr_at(step);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(&[1.0, -3.0, 0.25]));
        let before = store.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            schedule: Schedule { warmup_steps: 0, ..Schedule::default() },
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let grads = Gradients::zeros_like(&store);
        for _ in 0..5 {
            opt.step(&mut store, &grads).unwrap();
        }
        assert_eq!(store.get(id), before.get(id));
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row(&[0.0, 0.0]));
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            schedule: Schedule { lr_peak: 0.1, lr_min: 0.1, warmup_steps: 0, decay_steps: 10 },
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        let mut g = Graph::new();
        let id = store.id("w").unwrap();
        let w = g.param(&store, id);
        let target = Tensor::row(&[1.0, -1.0]);
        let loss = g.mse(w, target).unwrap();
        let grads = g.backward(loss, &store).unwrap();
        opt.step(&mut store, &grads).unwrap();
        let w = store.get(id).data();
        assert!((w[0] - 0.1).abs() < 1e-6 && (w[1] + 0.1).abs() < 1e-6);
    }

    use crate::graph::Graph;
}
