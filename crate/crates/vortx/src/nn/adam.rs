//! Adam optimizer with bias correction and linear learning-rate warmup.

use std::collections::BTreeMap;

use super::params::ParamStore;

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Standard Adam. Effective rate is `lr * min(1, step / warmup)` with
/// `step` counted from 1.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    step: u64,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(lr: f64, warmup_steps: u64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn effective_lr(&self) -> f64 {
        let step = self.step.max(1);
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    /// Apply one update from named gradients. Frozen parameters and
    /// parameters without a gradient entry are left untouched; moment
    /// state still advances only for updated parameters.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) {
        self.step += 1;
        let lr_eff = self.effective_lr();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = grads.keys().cloned().collect();
        for name in names {
            if store.is_frozen(&name) {
                continue;
            }
            let g = &grads[&name];
            let values = store.values_mut(&name);
            assert_eq!(
                g.len(),
                values.len(),
                "adam: grad len {} vs param {} for {name}",
                g.len(),
                values.len()
            );
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; values.len()],
                v: vec![0.0; values.len()],
            });
            for i in 0..values.len() {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                values[i] -= lr_eff * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Drop moment state, e.g. between training phases.
    pub fn reset(&mut self) {
        self.step = 0;
        self.slots.clear();
    }
}
