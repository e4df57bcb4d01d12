//! AdamW with decoupled weight decay and cosine-annealed learning rate.

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Total iteration budget for the cosine schedule; the learning rate
    /// anneals from `lr` at step 0 to 0 at step `total_iters`.
    pub total_iters: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            total_iters: 1,
        }
    }
}

/// Cosine annealing from `base` to 0: `base * (1 + cos(pi * n / total)) / 2`.
pub fn cosine_lr(base: f64, step: u64, total_iters: u64) -> f64 {
    let total = total_iters.max(1);
    let n = step.min(total);
    base * 0.5 * (1.0 + (std::f64::consts::PI * n as f64 / total as f64).cos())
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: per-parameter first/second moments plus a step counter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    moments: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate that the *next* call to [`AdamW::step`] will use.
    pub fn current_lr(&self) -> f64 {
        cosine_lr(self.cfg.lr, self.step, self.cfg.total_iters)
    }

    /// Apply one update to every trainable parameter in `ids` that has a
    /// gradient. Panics if a listed trainable parameter is missing its
    /// gradient: that means backward was skipped.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) {
        let lr = self.current_lr();
        let (b1, b2) = self.cfg.betas;
        let t = (self.step + 1) as i32;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for &id in ids {
            let entry = store.entry_mut(id);
            assert!(entry.trainable, "optimizer step on frozen parameter {}", entry.name);
            let grad = entry
                .grad
                .as_ref()
                .unwrap_or_else(|| panic!("missing gradient for parameter {}", entry.name));
            let n = entry.value.len();
            let slot = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            debug_assert_eq!(slot.m.len(), n, "moment shape matches parameter");
            let data = entry.value.data_mut();
            for i in 0..n {
                let g = grad[i];
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                let m_hat = slot.m[i] / bias1;
                let v_hat = slot.v[i] / bias2;
                data[i] -= lr * (m_hat / (v_hat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * data[i]);
            }
        }
        self.step += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]), true);
        store.entry_mut(id).grad = Some(vec![0.0; 3]);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            total_iters: 10,
            ..Default::default()
        });
        let before = store.value(id).clone();
        for _ in 0..5 {
            opt.step(&mut store, &[id]);
        }
        assert_eq!(store.value(id).data(), before.data());
    }

    #[test]
    fn cosine_schedule_closed_form() {
        let base = 0.01;
        let n = 1000;
        assert_eq!(cosine_lr(base, 0, n), base);
        assert!((cosine_lr(base, n, n)).abs() < 1e-18);
        assert!((cosine_lr(base, n / 2, n) - base / 2.0).abs() < 1e-15);
    }

    #[test]
    fn scalar_trajectory_matches_hand_rolled_oracle() {
        // independent scalar AdamW, written straight from the update rule
        let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.999, 1e-8, 0.01);
        let total = 100u64;
        let g = 0.3;
        let mut p_ref = 2.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let lr_t = cosine_lr(lr, (t - 1) as u64, total);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p_ref -= lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * p_ref);
            expected.push(p_ref);
        }

        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(2.0), true);
        let mut opt = AdamW::new(AdamWConfig {
            lr,
            betas: (b1, b2),
            eps,
            weight_decay: wd,
            total_iters: total,
        });
        for want in expected {
            store.entry_mut(id).grad = Some(vec![g]);
            opt.step(&mut store, &[id]);
            assert!((store.value(id).item() - want).abs() < 1e-12);
        }
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    #[should_panic(expected = "missing gradient")]
    fn missing_gradient_panics() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0), true);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, &[id]);
    }
}
